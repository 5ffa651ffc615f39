"""Cart-pole benchmark runs: unknown drags and unknown dynamics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import ControllerConfig, GainCertificate, check_gain_condition
from .dynamics import (DEFAULT_CARTPOLE_HI, DEFAULT_CARTPOLE_LO, BasisFunctionModel, CartPole, box_points,
                       cartpole_affine, cartpole_b_bar, cartpole_input_matrix, cartpole_model,
                       cartpole_parametric, cartpole_regressors, eval_cartpole)
from .ilqr import RecedingHorizonIlqr
from .mlp import MLP
from .sim import AffineAdaptive, AncmAdaptive, BasisAdaptive, Policy, RobustNcm, SimConfig, simulate
from .synthesis import Grid, MetricSample, SynthesisConfig, build_dataset, constant_metric

Array = np.ndarray

BENCHMARK_X0 = (0.83, -0.32, 0.39, 0.45)


@dataclass
class ScenarioResult:
    logs: dict
    certificates: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def state_grid(half_widths, counts, p_values=(0.0,)) -> Array:
    """Lattice over (p, theta, p_dot, theta_dot) with x_d = 0."""
    hw = np.asarray(half_widths, dtype=float)
    pts = box_points(-hw, hw, counts)
    return np.vstack([np.column_stack([np.full(len(pts), p), pts]) for p in p_values])


def uniform_metric(psys, alpha, R, half_widths=(0.6, 1.5, 1.5), counts=(5, 3, 5),
                   theta_lo=None, theta_hi=None, nu_weight=0.1, p_values=(0.0,)) -> tuple[MetricSample, object]:
    """One constant metric certified at every lattice state and every vertex of a parameter box.

    The cart-pole SDC matrix is affine in the drags, so the box vertices
    cover the whole box at each state.  Returns (shared sample, summary).
    """
    xs = state_grid(half_widths, counts, p_values)
    n = xs.shape[1]
    center = np.zeros(2 * n + (0 if theta_lo is None else len(theta_lo)))
    cfg = SynthesisConfig(alpha=alpha, R=np.atleast_2d(R), mode="uniform", nu_weight=nu_weight)
    if theta_lo is None:
        samples_pts = [np.concatenate([x, np.zeros(n)]) for x in xs]
    else:
        corners = box_points(theta_lo, theta_hi, [2] * len(theta_lo))
        samples_pts = [np.concatenate([x, np.zeros(n), c]) for x in xs for c in corners]
    grid = _ExplicitGrid(tuple(center), np.array(samples_pts))
    samples, summary = build_dataset(psys, replace(cfg, grid=grid))
    return samples[0], summary


def cartpole_grid(n_angle: int = 20, n_rate: int = 20, angle: float = 0.5, rate: float = 1.0,
                  theta_axes=None) -> Grid:
    """Lattice over pole angle and pole rate with x_d = 0; ``theta_axes`` adds drag axes (lo, hi, count)."""
    p = 0 if theta_axes is None else len(theta_axes)
    axes = {1: (-angle, angle, n_angle), 3: (-rate, rate, n_rate)}
    for k, (lo, hi, cnt) in enumerate(theta_axes or ()):
        axes[8 + k] = (lo, hi, int(cnt))
    return Grid(tuple(np.zeros(8 + p)), axes)


class _ExplicitGrid:
    """Explicit point list with the ``points()`` interface of Grid."""

    def __init__(self, center, pts):
        self.center = center
        self.pts = pts

    def points(self) -> Array:
        return self.pts


# ---------------------------------------------------------------------------
# Unknown drags


@dataclass(frozen=True)
class DragScenarioConfig:
    x0: tuple = BENCHMARK_X0
    theta0: tuple = (4.0, 0.0016)
    theta_true: tuple = (0.5, 0.002)
    alpha: float = 1.0
    R: float = 1.0
    gamma: tuple = (0.1, 1e-5)
    # leakage only moves theta_hat; with a constant metric the aNCM input does not depend on it
    sigma: float = 100.0
    affine_sigma: float = 0.0
    theta_lo: tuple = (0.0, 0.0)
    theta_hi: tuple = (5.0, 0.01)
    half_widths: tuple = (0.6, 1.5, 1.5)
    counts: tuple = (5, 3, 5)
    sim: SimConfig = SimConfig(dt=0.01, T=15.0, d_sup=0.15)
    ilqr_horizon: int = 150
    ilqr_replan: int = 25
    ilqr_q: tuple = (1.0, 10.0, 1.0, 1.0)
    ilqr_r: float = 0.1
    controllers: tuple = ("ancm", "affine", "robust-ncm", "ilqr")


def drag_bounds(cp: CartPole, sample: MetricSample, cfg: DragScenarioConfig) -> dict:
    hw = np.asarray(cfg.half_widths)
    lo = np.r_[-1.5, -hw]
    hi = -lo
    xs = state_grid(cfg.half_widths, cfg.counts)
    y_bar = max(np.linalg.norm(cartpole_regressors(cp, x)[0], 2) for x in xs)
    return {
        "b_bar": cartpole_b_bar(cp, lo, hi),
        "rho_bar": 1.0 / cfg.R,
        "y_bar": float(y_bar),
        "phi_bar": float(y_bar),
        "theta_bar": float(np.linalg.norm(cfg.theta_true)),
        "omega_lower": sample.omega_lower,
        "omega_upper": sample.omega_upper,
        "chi": sample.chi,
        "d_bar": cfg.sim.d_sup,
    }


def drag_setup(cfg: DragScenarioConfig, cp: CartPole | None = None):
    """Metrics, controller configuration and certificate for the drag scenario."""
    cp = CartPole() if cp is None else cp
    true_cp = replace(cp, mu_c=cfg.theta_true[0], mu_p=cfg.theta_true[1])
    psys = cartpole_parametric(true_cp)
    shared, summary = uniform_metric(psys, cfg.alpha, cfg.R, cfg.half_widths, cfg.counts,
                                     cfg.theta_lo, cfg.theta_hi)
    wrong, _ = uniform_metric(psys, cfg.alpha, cfg.R, cfg.half_widths, cfg.counts,
                              cfg.theta0, cfg.theta0)
    bounds = drag_bounds(true_cp, shared, cfg)
    ccfg = ControllerConfig(R=np.eye(1) * cfg.R, Gamma=np.diag(cfg.gamma), sigma=cfg.sigma,
                            alpha=cfg.alpha, bounds=bounds)
    # exact metric: no learning error, so alpha_NCM = alpha
    cert = check_gain_condition("ancm", ccfg, 0.0, cfg.alpha)
    return dict(cp=true_cp, psys=psys, shared=shared, wrong=wrong, summary=summary, ccfg=ccfg, cert=cert)


def run_unknown_drag_scenario(cfg: DragScenarioConfig = DragScenarioConfig(), setup=None) -> ScenarioResult:
    """aNCM, affine adaptive (pseudo-inverse matching), robust NCM and iLQR on the true plant.

    Baselines use the wrong initial drag estimate frozen.  All runs share one
    disturbance realization (seeded by ``cfg.sim.seed``).
    """
    s = drag_setup(cfg) if setup is None else setup
    cp, psys, ccfg = s["cp"], s["psys"], s["ccfg"]
    plant = lambda x, u: eval_cartpole(cp, x, u)
    metric = constant_metric(s["shared"])
    wrong_metric = constant_metric(s["wrong"])
    wrong_cp = replace(cp, mu_c=cfg.theta0[0], mu_p=cfg.theta0[1])
    theta_true = np.asarray(cfg.theta_true)
    logs = {}
    if "ancm" in cfg.controllers:
        logs["ancm"] = simulate(plant, AncmAdaptive(metric, psys, ccfg, cfg.theta0), cfg.x0, cfg.sim,
                                theta_true=theta_true, certificate=s["cert"])
    if "affine" in cfg.controllers:
        asys = cartpole_affine(cp)
        acfg = replace(ccfg, sigma=cfg.affine_sigma)
        logs["affine"] = simulate(plant, AffineAdaptive(metric, asys, acfg, cfg.theta0), cfg.x0, cfg.sim,
                                  theta_true=theta_true)
    if "robust-ncm" in cfg.controllers:
        logs["robust-ncm"] = simulate(plant, RobustNcm(wrong_metric, cartpole_model(wrong_cp), ccfg.R),
                                      cfg.x0, cfg.sim)
    if "ilqr" in cfg.controllers:
        mpc = RecedingHorizonIlqr(lambda x, u: eval_cartpole(wrong_cp, x, u), cfg.sim.dt, cfg.ilqr_horizon,
                                  np.diag(cfg.ilqr_q), np.eye(1) * cfg.ilqr_r, replan=cfg.ilqr_replan)
        logs["ilqr"] = simulate(plant, Policy(mpc, "ilqr"), cfg.x0, cfg.sim)
    info = {"chi": s["shared"].chi, "nu": s["shared"].nu, "alpha_a": s["cert"].alpha_a,
            "feasible": s["summary"].feasible}
    return ScenarioResult(logs, {"ancm": s["cert"]}, info)


# ---------------------------------------------------------------------------
# Unknown dynamics: nominal network model with adapted last layer


@dataclass(frozen=True)
class UnknownDynConfig:
    x0: tuple = BENCHMARK_X0
    hidden: tuple = (5, 5)
    n_train: int = 10000
    fit_epochs: int = 300
    fit_lr: float = 0.05
    fit_seed: int = 0
    d_M_bar: float = 0.5
    u_check: float = 5.0
    alpha: float = 1.0
    R: float = 1.0
    gamma: float = 1e4
    sigma: float = 1e-6
    half_widths: tuple = (0.6, 1.5, 1.5)
    counts: tuple = (5, 3, 5)
    p_values: tuple = (-1.5, 0.0, 1.5)
    sim: SimConfig = SimConfig(dt=0.01, T=15.0, d_sup=0.15)
    ilqr_horizon: int = 150
    ilqr_replan: int = 25
    ilqr_q: tuple = (1.0, 10.0, 1.0, 1.0)
    ilqr_r: float = 0.1
    threshold: float = 5.0


@dataclass
class NominalModel:
    net: MLP
    scale: Array
    validation_error: float
    f_error: float
    b_error: float

    def features(self, x) -> Array:
        W1, W2 = self.net.weights[:2]
        b1, b2 = self.net.biases[:2]
        h = np.tanh(W1 @ (np.asarray(x, dtype=float) / self.scale) + b1)
        for W, b in zip(self.net.weights[1:-1], self.net.biases[1:-1]):
            h = np.tanh(W @ h + b)
        return np.append(h, 1.0)

    def basis_model(self, d_M_bar: float, u_max: float) -> BasisFunctionModel:
        W, b = self.net.weights[-1], self.net.biases[-1]
        n = W.shape[0] // 2
        F = np.hstack([W[:n], b[:n, None]])
        B1 = np.hstack([W[n:], b[n:, None]])
        k = F.shape[1]
        return BasisFunctionModel(F, (B1,), self.features, (self.features,),
                                  zeta_bar=float(np.sqrt(k) * max(1.0, u_max)), d_M_bar=d_M_bar)


def _true_fb(cp, X):
    return np.array([np.r_[eval_cartpole(cp, x, 0.0), cartpole_input_matrix(cp, x)[:, 0]] for x in X])


def fit_nominal_model(cp: CartPole, cfg: UnknownDynConfig = UnknownDynConfig()) -> NominalModel:
    """Least-squares fit of (f(x), b(x)) by a small tanh network, SGD with momentum."""
    lo, hi = DEFAULT_CARTPOLE_LO, DEFAULT_CARTPOLE_HI
    rng = np.random.default_rng(cfg.fit_seed)
    X = rng.uniform(lo, hi, (cfg.n_train, 4))
    T = _true_fb(cp, X)
    net = MLP((4, *cfg.hidden, 8), seed=cfg.fit_seed)
    Xn = X / hi
    vw = [np.zeros_like(w) for w in net.weights]
    vb = [np.zeros_like(b) for b in net.biases]
    for _ in range(cfg.fit_epochs):
        perm = rng.permutation(len(X))
        for k in range(0, len(X), 64):
            i = perm[k:k + 64]
            Y, cache = net.forward(Xn[i])
            for j, (dw, db) in enumerate(net.backward(cache, 2.0 * (Y - T[i]) / len(i))):
                vw[j] = 0.9 * vw[j] - cfg.fit_lr * dw
                vb[j] = 0.9 * vb[j] - cfg.fit_lr * db
                net.weights[j] += vw[j]
                net.biases[j] += vb[j]
    Xv = box_points(lo, hi, [3, 9, 9, 9])
    Tv = _true_fb(cp, Xv)
    Yv, _ = net.forward(Xv / hi)
    ef = Yv[:, :4] - Tv[:, :4]
    eb = Yv[:, 4:] - Tv[:, 4:]
    err = max(np.linalg.norm(ef + u * eb, axis=1).max() for u in np.linspace(-cfg.u_check, cfg.u_check, 5))
    return NominalModel(net, hi.copy(), float(err), float(np.linalg.norm(ef, axis=1).max()),
                        float(np.linalg.norm(eb, axis=1).max()))


def unknown_dyn_setup(cfg: UnknownDynConfig, cp: CartPole | None = None):
    cp = CartPole() if cp is None else cp
    nominal = fit_nominal_model(cp, cfg)
    bm = nominal.basis_model(cfg.d_M_bar, cfg.u_check)
    sys = bm.as_system()
    shared, summary = uniform_metric(sys, cfg.alpha, cfg.R, cfg.half_widths, cfg.counts, p_values=cfg.p_values)
    bounds = {"b_bar": float(max(np.linalg.norm(sys.B(x)) for x in state_grid(cfg.half_widths, cfg.counts))),
              "rho_bar": 1.0 / cfg.R, "zeta_bar": bm.zeta_bar, "d_M_bar": cfg.d_M_bar,
              "theta_bar": float(np.linalg.norm(np.concatenate([bm.F_hat.ravel(), bm.B_hat[0].ravel()]))),
              "omega_lower": shared.omega_lower, "omega_upper": shared.omega_upper,
              "d_bar": cfg.sim.d_sup, "m": 1}
    ccfg = ControllerConfig(R=np.eye(1) * cfg.R, Gamma=cfg.gamma, sigma=cfg.sigma, alpha=cfg.alpha,
                            bounds=bounds)
    cert = check_gain_condition("basis", ccfg, 0.0, cfg.alpha)
    return dict(cp=cp, nominal=nominal, bm=bm, sys=sys, shared=shared, summary=summary, ccfg=ccfg, cert=cert)


def run_unknown_dynamics_scenario(cfg: UnknownDynConfig = UnknownDynConfig(), setup=None) -> ScenarioResult:
    """Adapted last-layer weights vs robust NCM and iLQR on the frozen nominal network model."""
    s = unknown_dyn_setup(cfg) if setup is None else setup
    cp, bm, sys, ccfg = s["cp"], s["bm"], s["sys"], s["ccfg"]
    plant = lambda x, u: eval_cartpole(cp, x, u)
    metric = constant_metric(s["shared"])
    logs = {
        "ancm-basis": simulate(plant, BasisAdaptive(metric, bm, ccfg), cfg.x0, cfg.sim),
        "robust-ncm": simulate(plant, RobustNcm(metric, sys, ccfg.R), cfg.x0, cfg.sim),
    }
    mpc = RecedingHorizonIlqr(sys.rhs, cfg.sim.dt, cfg.ilqr_horizon, np.diag(cfg.ilqr_q),
                              np.eye(1) * cfg.ilqr_r, replan=cfg.ilqr_replan)
    logs["ilqr"] = simulate(plant, Policy(mpc, "ilqr"), cfg.x0, cfg.sim)
    info = {"validation_error": s["nominal"].validation_error, "chi": s["shared"].chi,
            "threshold": cfg.threshold}
    return ScenarioResult(logs, {"ancm-basis": s["cert"]}, info)
