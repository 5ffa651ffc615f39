"""Fixed-step RK4 simulation of closed loops with adaptation states."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controllers import (AdaptiveState, ControllerConfig, GainCertificate, ancm_control_step, affine_adaptive_step,
                          basis_control, basis_weight_step, lyapunov_value, tracking_error_bound)
from .dynamics import AffineUncertainSystem, BasisFunctionModel, ParametricSystem, SystemModel
from .errors import NonFiniteState

Array = np.ndarray


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    T: float = 15.0
    d_sup: float = 0.0
    seed: int = 0
    n_modes: int = 6
    d_channels: tuple | None = None  # state indices the disturbance acts on (None: all)

    def __post_init__(self):
        if self.dt <= 0 or self.T < 0:
            raise ValueError("dt must be positive and T nonnegative")
        if self.d_sup < 0:
            raise ValueError("disturbance bound must be nonnegative")

    @property
    def n_rows(self) -> int:
        return time_grid(self.dt, self.T).size


def time_grid(dt: float, T: float) -> Array:
    """Times 0, dt, 2dt, ... with the last step shortened to land on T."""
    k = math.ceil(T / dt - 1e-9)
    t = np.arange(k + 1) * dt
    t[-1] = T if k > 0 else 0.0
    return t


class Disturbance:
    """Seeded sum of sinusoids in time, clipped to the Euclidean ball of radius ``sup``.

    The raw signal has amplitude 1.5 sup so the clip is active a good part
    of the time.
    """

    def __init__(self, n: int, sup: float, seed: int = 0, n_modes: int = 6, channels=None):
        self.n = n
        self.sup = float(sup)
        rng = np.random.default_rng(seed)
        mask = np.zeros(n)
        mask[list(range(n)) if channels is None else list(channels)] = 1.0
        self.amp = rng.standard_normal((n_modes, n)) * mask
        norms = np.linalg.norm(self.amp, axis=1, keepdims=True)
        self.amp = self.amp / np.where(norms > 0, norms, 1.0) * (1.5 * self.sup / np.sqrt(n_modes))
        self.freq = rng.uniform(0.2, 3.0, n_modes)
        self.phase = rng.uniform(0.0, 2 * np.pi, n_modes)

    def __call__(self, t: float, x=None) -> Array:
        if self.sup == 0.0:
            return np.zeros(self.n)
        d = np.sin(self.freq * t + self.phase) @ self.amp
        nd = np.linalg.norm(d)
        return d * (self.sup / nd) if nd > self.sup else d


@dataclass
class TrajectoryLog:
    """Time series of a run.  ``x`` holds the integrated (composite) state."""

    t: Array
    x: Array
    name: str = ""
    x_d: Array | None = None
    u: Array | None = None
    theta_hat: Array | None = None
    e_norm: Array | None = None
    V: Array | None = None
    bound: Array | None = None
    cert_pass: bool = False
    aborted: bool = False
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def columns(self) -> tuple[list, Array]:
        n = self.x.shape[1]
        cols, blocks = ["t"], [self.t[:, None]]
        cols += [f"x{i}" for i in range(n)]
        blocks.append(self.x)
        for name, arr in (("xd", self.x_d), ("u", self.u), ("th", self.theta_hat)):
            if arr is not None and arr.size:
                cols += [f"{name}{i}" for i in range(arr.shape[1])]
                blocks.append(arr)
        for name, arr in (("e_norm", self.e_norm), ("V", self.V), ("bound", self.bound)):
            if arr is not None:
                cols.append(name)
                blocks.append(arr[:, None])
        cols.append("cert_pass")
        blocks.append(np.full((self.t.size, 1), 1.0 if self.cert_pass else 0.0))
        return cols, np.hstack(blocks)


def integrate_rk4(derivative: Callable[[float, Array], Array], z0, dt: float, T: float,
                  on_step: Callable[[float, Array], None] | None = None, name: str = "") -> TrajectoryLog:
    """Classic fourth-order Runge-Kutta on ``z' = derivative(t, z)``.

    ``on_step(t, z)`` is called at every logged time before the step leaves
    it.  A non-finite state raises NonFiniteState carrying the partial log.
    """
    ts = time_grid(dt, T)
    z = np.array(z0, dtype=float)
    Z = np.empty((ts.size, z.size))
    for k, t in enumerate(ts):
        if not np.all(np.isfinite(z)):
            log = TrajectoryLog(ts[:k], Z[:k].copy(), name=name, aborted=True)
            raise NonFiniteState(f"non-finite state at t={t:.6g}", log)
        Z[k] = z
        if on_step is not None:
            on_step(t, z)
        if k + 1 == ts.size:
            break
        h = ts[k + 1] - t
        with np.errstate(all="ignore"):
            try:
                k1 = derivative(t, z)
                k2 = derivative(t + 0.5 * h, z + 0.5 * h * k1)
                k3 = derivative(t + 0.5 * h, z + 0.5 * h * k2)
                k4 = derivative(t + h, z + h * k3)
                z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError):
                z = np.full_like(z, np.nan)
    return TrajectoryLog(ts, Z, name=name)


# ---------------------------------------------------------------------------
# Controllers as closed-loop components.  Each one maps (t, x, x_d, u_d, a, u_prev)
# to (u, a_dot) where ``a`` is its flattened adaptation state.


class RobustNcm:
    adaptive = False

    def __init__(self, metric, model: SystemModel, R, name="robust-ncm"):
        self.metric, self.model, self.R, self.name = metric, model, np.atleast_2d(R), name
        self.a0 = np.zeros(0)

    def __call__(self, t, x, x_d, u_d, a, u_prev):
        M = self.metric(x, x_d, None)
        u = np.atleast_1d(u_d) - np.linalg.solve(self.R, self.model.B(x).T @ (M @ (x - x_d)))
        return u, np.zeros(0)

    def lyapunov(self, x, x_d, a, theta_true=None):
        e = x - x_d
        return float(e @ self.metric(x, x_d, None) @ e)


class AncmAdaptive:
    adaptive = True

    def __init__(self, metric, psys: ParametricSystem, cfg: ControllerConfig, theta0, name="ancm",
                 derivative_step=1e-5):
        self.metric, self.psys, self.cfg, self.name = metric, psys, cfg, name
        self.a0 = np.array(theta0, dtype=float)
        self.step = derivative_step

    def __call__(self, t, x, x_d, u_d, a, u_prev):
        return ancm_control_step(self.metric, self.psys, x, x_d, u_d, u_prev, AdaptiveState(a, t), self.cfg,
                                 self.step)

    def lyapunov(self, x, x_d, a, theta_true=None):
        e = x - x_d
        tt = np.zeros(0) if theta_true is None else a - theta_true
        return lyapunov_value(self.metric(x, x_d, a), e, tt, self.cfg.gamma_matrix(a.size))


class AffineAdaptive:
    adaptive = True

    def __init__(self, metric, asys: AffineUncertainSystem, cfg: ControllerConfig, theta0, name="affine",
                 allow_unmatched=True):
        self.metric, self.asys, self.cfg, self.name = metric, asys, cfg, name
        self.a0 = np.array(theta0, dtype=float)
        self.allow_unmatched = allow_unmatched

    def __call__(self, t, x, x_d, u_d, a, u_prev):
        return affine_adaptive_step(self.metric, self.asys, x, x_d, u_d, AdaptiveState(a, t), self.cfg,
                                    self.allow_unmatched)

    def lyapunov(self, x, x_d, a, theta_true=None):
        e = x - x_d
        tt = np.zeros(0) if theta_true is None else a - theta_true
        return lyapunov_value(self.metric(x, x_d, None), e, tt, self.cfg.gamma_matrix(a.size))


class BasisAdaptive:
    """Adapts the weights of a BasisFunctionModel; state is (vec F, vec B_1, ...)."""

    adaptive = True

    def __init__(self, metric, bm: BasisFunctionModel, cfg: ControllerConfig, name="ancm-basis",
                 derivative_step=1e-5, adapt=True):
        self.metric, self.bm, self.cfg, self.name = metric, bm, cfg, name
        self.step = derivative_step
        self.adapt = adapt
        self.shapes = [bm.F_hat.shape] + [b.shape for b in bm.B_hat]
        self.a0 = np.concatenate([bm.F_hat.ravel()] + [b.ravel() for b in bm.B_hat])

    def unpack(self, a) -> BasisFunctionModel:
        parts, k = [], 0
        for s in self.shapes:
            size = s[0] * s[1]
            parts.append(a[k:k + size].reshape(s))
            k += size
        return self.bm.with_weights(parts[0], parts[1:])

    def __call__(self, t, x, x_d, u_d, a, u_prev):
        bm = self.unpack(a)
        u = basis_control(self.metric, bm, x, x_d, u_d, self.cfg.R)
        if not self.adapt:
            return u, np.zeros_like(a)
        dF, dB = basis_weight_step(self.metric, bm, x, x_d, u, u_d, self.cfg, self.step)
        return u, np.concatenate([dF.ravel()] + [d.ravel() for d in dB])

    def lyapunov(self, x, x_d, a, theta_true=None):
        e = x - x_d
        return float(e @ self.metric(x, x_d, None) @ e)


class Policy:
    """Non-adaptive feedback given as ``policy(t, x) -> u``."""

    adaptive = False

    def __init__(self, policy, name="policy"):
        self.policy, self.name = policy, name
        self.a0 = np.zeros(0)

    def __call__(self, t, x, x_d, u_d, a, u_prev):
        return np.atleast_1d(self.policy(t, x)), np.zeros(0)

    def lyapunov(self, x, x_d, a, theta_true=None):
        e = x - x_d
        return float(e @ e)


def simulate(plant: Callable[[Array, Array], Array], controller, x0, sim: SimConfig, x_d=None, u_d=None,
             theta_true=None, certificate: GainCertificate | None = None, m: int = 1,
             log_lyapunov: bool = True) -> TrajectoryLog:
    """Closed loop x' = plant(x, u) + d(t) with the controller's adaptation integrated jointly.

    ``x_d(t)`` and ``u_d(t)`` default to the origin.  The input regressor lag
    ``u_prev`` is refreshed once per step.  When ``certificate`` passes, the
    tracking-error envelope from V(0) is logged as ``bound``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    xd_fn = (lambda t: np.zeros(n)) if x_d is None else x_d
    ud_fn = (lambda t: np.zeros(m)) if u_d is None else u_d
    dist = Disturbance(n, sim.d_sup, sim.seed, sim.n_modes, sim.d_channels)
    a0 = np.asarray(controller.a0, dtype=float)
    state = {"u_prev": np.asarray(ud_fn(0.0), dtype=float)}
    rows_u, rows_V, rows_xd = [], [], []

    def deriv(t, z):
        x, a = z[:n], z[n:]
        u, da = controller(t, x, xd_fn(t), ud_fn(t), a, state["u_prev"])
        return np.concatenate([plant(x, u) + dist(t, x), da])

    def on_step(t, z):
        x, a = z[:n], z[n:]
        xd = np.asarray(xd_fn(t), dtype=float)
        try:
            u, _ = controller(t, x, xd, ud_fn(t), a, state["u_prev"])
        except Exception:
            u = np.full(m, np.nan)
        state["u_prev"] = u
        rows_u.append(np.atleast_1d(u))
        rows_xd.append(xd)
        if log_lyapunov:
            try:
                with np.errstate(all="ignore"):
                    rows_V.append(controller.lyapunov(x, xd, a, theta_true))
            except Exception:
                rows_V.append(np.nan)

    z0 = np.concatenate([x0, a0])
    aborted = False
    try:
        raw = integrate_rk4(deriv, z0, sim.dt, sim.T, on_step, controller.name)
    except NonFiniteState as exc:
        raw, aborted = exc.log, True
    k = len(raw)
    X = raw.x[:, :n]
    with np.errstate(all="ignore"):
        e_norm = np.linalg.norm(X - np.array(rows_xd[:k]).reshape(k, n), axis=1)
    log = TrajectoryLog(
        t=raw.t, x=X, name=controller.name,
        x_d=np.array(rows_xd[:k]).reshape(k, n),
        u=np.array(rows_u[:k]).reshape(k, -1),
        theta_hat=raw.x[:, n:],
        e_norm=e_norm,
        V=np.array(rows_V[:k]) if log_lyapunov else None,
        aborted=aborted,
    )
    if certificate is not None and certificate.passed and log_lyapunov and k:
        log.bound = tracking_error_bound(certificate, log.V[0], log.t)
        log.cert_pass = True
    return log
