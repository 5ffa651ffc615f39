"""Metric-based feedback, adaptation laws, gain conditions and error bounds.

A metric is any callable ``metric(x, x_d, theta_hat) -> n x n`` matrix; a
trained MetricNet, an exact SDP metric or a constant all qualify.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (AffineUncertainSystem, BasisFunctionModel, LagrangianSystem, ParametricSystem,
                       SystemModel, matched_phi, sdc_matrix)
from .errors import SingularHessian
from .lmi import LmiProblem, max_eig, min_eig, solve_sdp
from .ncm import metric_derivatives

Array = np.ndarray


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and bound constants.

    ``Gamma`` is a p x p SPD matrix or a scalar gamma (Gamma = gamma I).
    ``bounds`` may hold b_bar, rho_bar, phi_bar, delta_bar, y_bar, zeta_bar,
    theta_bar, omega_lower, omega_upper, d_bar, m.
    ``leakage_on_state`` selects sigma*s (default) or sigma*theta_hat for the
    Lagrangian law.
    """

    R: Array = field(default_factory=lambda: np.eye(1))
    Gamma: object = 1.0
    sigma: float = 0.0
    alpha: float = 1.0
    bounds: dict = field(default_factory=dict)
    leakage_on_state: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        G = np.asarray(self.Gamma, dtype=float)
        if G.ndim == 0:
            if G <= 0:
                raise ValueError("Gamma must be positive")
        elif np.linalg.eigvalsh(0.5 * (G + G.T)).min() <= 0:
            raise ValueError("Gamma must be positive definite")

    def gamma_matrix(self, p: int) -> Array:
        G = np.asarray(self.Gamma, dtype=float)
        return G * np.eye(p) if G.ndim == 0 else G

    @property
    def gamma_bounds(self) -> tuple:
        G = np.asarray(self.Gamma, dtype=float)
        if G.ndim == 0:
            return float(G), float(G)
        w = np.linalg.eigvalsh(G)
        return float(w[0]), float(w[-1])


@dataclass
class AdaptiveState:
    theta_hat: Array
    t: float = 0.0
    excursion: bool = False


@dataclass(frozen=True)
class GainCertificate:
    kind: str
    alpha_a: float
    matrix: Array
    passed: bool
    scaling: Array = None
    d_bar_a: float = np.nan
    omega_upper: float = np.nan

    def text(self) -> str:
        lines = [f"kind: {self.kind}", f"passed: {str(bool(self.passed)).lower()}",
                 f"alpha_a: {self.alpha_a:.17g}", f"d_bar_a: {self.d_bar_a:.17g}",
                 f"omega_upper: {self.omega_upper:.17g}",
                 "matrix: " + "; ".join(" ".join(f"{v:.17g}" for v in row) for row in self.matrix)]
        return "\n".join(lines) + "\n"


def _feedback(metric, B, R, x, x_d, theta_hat):
    M = metric(x, x_d, theta_hat)
    e = np.asarray(x, dtype=float) - np.asarray(x_d, dtype=float)
    return np.linalg.solve(np.atleast_2d(R), B.T @ (M @ e)), M, e


def robust_ncm_u(metric, sys: SystemModel, x, x_d, u_d, R, theta_hat=None) -> Array:
    """u = u_d - R^-1 B(x)^T M e."""
    fb, _, _ = _feedback(metric, sys.B(x), R, x, x_d, theta_hat)
    return np.atleast_1d(u_d) - fb


def affine_adaptive_step(metric, sys: AffineUncertainSystem, x, x_d, u_d, state: AdaptiveState,
                         cfg: ControllerConfig, allow_unmatched: bool = False):
    """u = u_d - R^-1 B^T M e + phi^T theta_hat;  theta_hat' = -Gamma (phi B^T M e + sigma theta_hat)."""
    th = np.asarray(state.theta_hat, dtype=float)
    B = sys.base.B(x)
    phi = matched_phi(sys, x, x_d, allow_unmatched=allow_unmatched)
    fb, M, e = _feedback(metric, B, cfg.R, x, x_d, None)
    u = np.atleast_1d(u_d) - fb + phi.T @ th
    G = cfg.gamma_matrix(th.size)
    dth = -G @ (phi @ (B.T @ (M @ e)) + cfg.sigma * th)
    return u, dth


def lagrangian_adaptive_step(metric, lsys: LagrangianSystem, s, state: AdaptiveState, cfg: ControllerConfig):
    """tau = -R^-1 H^-T M s + Delta theta_hat;  theta_hat' = -Gamma (Delta^T H^-T M s + sigma s).

    With ``cfg.leakage_on_state`` false the leakage is sigma*theta_hat instead.
    """
    s = np.asarray(s, dtype=float)
    th = np.asarray(state.theta_hat, dtype=float)
    H = lsys.inertia(s)
    M = metric(s, np.zeros_like(s), None)
    HtMs = np.linalg.solve(H.T, M @ s)
    D = np.atleast_2d(lsys.Delta(s))
    tau = -np.linalg.solve(cfg.R, HtMs) + D @ th
    leak = s if cfg.leakage_on_state else th
    if leak.size != th.size:
        raise ValueError("sigma*s leakage needs dim(s) == dim(theta); use leakage_on_state=False")
    dth = -cfg.gamma_matrix(th.size) @ (D.T @ HtMs + cfg.sigma * leak)
    return tau, dth


def ancm_regressors(psys: ParametricSystem, x, x_d, u_prev, u_d):
    Y = psys.regressor_f(x) + psys.regressor_b(x, u_prev)
    Yd = psys.regressor_f(x_d) + psys.regressor_b(x_d, u_d)
    return Y, Yd


def ancm_control_step(metric, psys: ParametricSystem, x, x_d, u_d, u_prev, state: AdaptiveState,
                      cfg: ControllerConfig, derivative_step: float = 1e-5):
    """u = u_d - R^-1 B(x; th)^T M e;
    th' = Gamma((Y^T dM_x + Y_d^T dM_xd + Ytilde^T M) e - sigma th).

    Y uses the previous input ``u_prev`` (one-step lag) for the input regressor.
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    th = np.asarray(state.theta_hat, dtype=float)
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    B = psys.B(x, th)
    fb, M, e = _feedback(metric, B, cfg.R, x, x_d, th)
    u = u_d - fb
    if th.size == 0:
        return u, th.copy()
    Y, Yd = ancm_regressors(psys, x, x_d, u_prev, u_d)
    dMx, dMxd = metric_derivatives(metric, x, x_d, th, e, derivative_step)
    drive = (Y.T @ dMx + Yd.T @ dMxd + (Y - Yd).T @ M) @ e
    dth = cfg.gamma_matrix(th.size) @ (drive - cfg.sigma * th)
    return u, dth


def basis_control(metric, bm: BasisFunctionModel, x, x_d, u_d, R, weights_key=None) -> Array:
    """u = u_d - R^-1 Bhat(x)^T M e with the model's current input matrix."""
    fb, _, _ = _feedback(metric, bm.input_matrix(x), R, x, x_d, weights_key)
    return np.atleast_1d(u_d) - fb


def basis_weight_step(metric, bm: BasisFunctionModel, x, x_d, u, u_d, cfg: ControllerConfig,
                      derivative_step: float = 1e-5, theta_hat=None):
    """Weight rates W' = (dM_x e z^T + dM_xd e z_d^T + M e (z - z_d)^T - sigma W) / gamma.

    z = phi(x) for F and z = varphi_i(x) u_i for B_i.  Returns (F', [B_i']).
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u = np.atleast_1d(u)
    u_d = np.atleast_1d(u_d)
    gamma = float(np.asarray(cfg.Gamma))
    e = x - x_d
    M = metric(x, x_d, theta_hat)
    dMx, dMxd = metric_derivatives(metric, x, x_d, theta_hat, e, derivative_step)
    a, b, c = dMx @ e, dMxd @ e, M @ e

    def rate(W, z, zd):
        return (np.outer(a, z) + np.outer(b, zd) + np.outer(c, z - zd) - cfg.sigma * W) / gamma

    dF = rate(bm.F_hat, bm.phi(x), bm.phi(x_d))
    dB = [rate(Bi, vp(x) * u[i], vp(x_d) * u_d[i]) for i, (Bi, vp) in enumerate(zip(bm.B_hat, bm.varphi))]
    return dF, dB


# ---------------------------------------------------------------------------
# Gain conditions and bounds


def _coupling(kind: str, bounds: dict) -> float:
    if kind == "affine":
        return bounds["phi_bar"] * bounds["b_bar"]
    if kind == "lagrangian":
        return bounds["delta_bar"] * bounds["b_bar"]
    if kind == "ancm":
        return bounds["y_bar"]
    if kind == "basis":
        return bounds["zeta_bar"]
    raise ValueError(f"unknown gain-condition kind {kind!r}")


def gain_matrices(kind: str, cfg: ControllerConfig, eps_ell: float, alpha_ncm: float):
    """(C, D): the condition is C + 2 alpha_a D <= 0."""
    b = cfg.bounds
    w_lo, w_up = b["omega_lower"], b["omega_upper"]
    g_lo, _ = cfg.gamma_bounds
    xi = _coupling(kind, b) * eps_ell
    k = int(b.get("m", 1)) + 1 if kind == "basis" else 1
    C = np.zeros((k + 1, k + 1))
    C[0, 0] = -2.0 * alpha_ncm / w_up
    C[0, 1:] = C[1:, 0] = xi
    C[1:, 1:] = -2.0 * cfg.sigma * np.eye(k)
    D = np.diag([1.0 / w_lo] + [1.0 / g_lo] * k)
    return C, D


def check_gain_condition(kind: str, cfg: ControllerConfig, eps_ell: float, alpha_ncm: float,
                         tol: float = 1e-14) -> GainCertificate:
    """Largest alpha_a > 0 with C + 2 alpha_a D <= 0, by bisection on the Jacobi min eigenvalue."""
    C, D = gain_matrices(kind, cfg, eps_ell, alpha_ncm)
    d_a = bound_rate_offset(kind, cfg)

    def ok(a):
        return max_eig(C + 2.0 * a * D) <= 0.0

    hi = min(-C[i, i] / (2.0 * D[i, i]) for i in range(C.shape[0]))
    if hi <= 0 or not ok(0.0):
        return GainCertificate(kind, 0.0, C, False, D, d_a, cfg.bounds["omega_upper"])
    lo = 0.0
    if ok(hi):
        lo = hi
    else:
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
    passed = lo > 0 and max_eig(C + 2.0 * lo * D) <= 1e-9
    return GainCertificate(kind, lo, C, passed, D, d_a, cfg.bounds["omega_upper"])


def closed_form_alpha_a(kind: str, cfg: ControllerConfig, eps_ell: float, alpha_ncm: float) -> float:
    """Hand solution of the 2 x 2 condition (smaller root of the determinant equation)."""
    C, D = gain_matrices(kind, cfg, eps_ell, alpha_ncm)
    if C.shape != (2, 2):
        raise ValueError("closed form only for the 2 x 2 condition")
    a, b, c = -C[0, 0], -C[1, 1], C[0, 1]
    p, q = 2.0 * D[0, 0], 2.0 * D[1, 1]
    if c == 0.0:
        return min(a / p, b / q)
    # det[[p t - a, c], [c, q t - b]] = 0 with both diagonals negative
    A2, A1, A0 = p * q, -(a * q + b * p), a * b - c * c
    disc = A1 * A1 - 4 * A2 * A0
    return float((-A1 - np.sqrt(disc)) / (2 * A2))


def bound_rate_offset(kind: str, cfg: ControllerConfig) -> float:
    """d_bar_a = sigma sqrt(gamma_upper) theta_bar + d_bar / sqrt(omega_lower)."""
    b = cfg.bounds
    _, g_up = cfg.gamma_bounds
    d = b.get("d_bar", 0.0)
    if kind == "lagrangian":
        d = b.get("b_bar", 0.0) * b.get("d_bar_s", 0.0)
    elif kind == "basis":
        d = b.get("d_bar", 0.0) + b.get("d_M_bar", 0.0)
    return cfg.sigma * np.sqrt(g_up) * b.get("theta_bar", 0.0) + d / np.sqrt(b["omega_lower"])


def tracking_error_bound(cert: GainCertificate, V0: float, t, cfg: ControllerConfig | None = None):
    """sqrt(omega_upper) (sqrt(V0) exp(-alpha_a t) + d_bar_a (1 - exp(-alpha_a t)) / alpha_a)."""
    if not cert.passed:
        raise ValueError("certificate did not pass; no bound available")
    if V0 < 0:
        raise ValueError("V0 must be nonnegative")
    d_a = cert.d_bar_a if cfg is None else bound_rate_offset(cert.kind, cfg)
    t = np.asarray(t, dtype=float)
    decay = np.exp(-cert.alpha_a * t)
    return np.sqrt(cert.omega_upper) * (np.sqrt(V0) * decay + d_a * (1.0 - decay) / cert.alpha_a)


def lyapunov_value(M, e, theta_tilde, Gamma) -> float:
    th = np.atleast_1d(theta_tilde)
    val = float(e @ M @ e)
    if th.size:
        val += float(th @ np.linalg.solve(np.atleast_2d(Gamma), th))
    return val


# ---------------------------------------------------------------------------
# CLF-QP gain and Bregman scaling


@dataclass
class ClfQpResult:
    K: Array
    p: float
    objective: float
    status: str


def clf_qp_gain(metric, psys, x, x_d, theta_hat, cfg: ControllerConfig, M_dot=None, A=None, B=None,
                u_d=None, tol: float = 1e-10) -> ClfQpResult:
    """min ||K e||^2 + p^2  s.t.  M_dot + 2 sym(M A + M B K) <= -2 alpha M + p I.

    A defaults to the SDC matrix of the model frozen at theta_hat and B to its
    input matrix.  The slack p keeps the program feasible for every input.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_d = np.atleast_1d(np.asarray(x_d, dtype=float))
    if A is None or B is None:
        model = psys.model(theta_hat) if isinstance(psys, ParametricSystem) else psys
        A = sdc_matrix(model, x, x_d, u_d) if A is None else A
        B = model.B(x) if B is None else B
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n, m = B.shape
    M = np.atleast_2d(metric(x, x_d, theta_hat))
    Md = np.zeros((n, n)) if M_dot is None else np.atleast_2d(M_dot)
    e = x - x_d
    prob = LmiProblem()
    prob.matrix("K", m, n)
    prob.free("p")
    prob.free("t")
    I = np.eye(n)

    def contraction(v):
        MBK = M @ B @ v["K"]
        S = M @ A + MBK
        return Md + S + S.T + 2.0 * cfg.alpha * M - v["p"] * I

    def epigraph(v):
        Ke = v["K"] @ e
        top = np.concatenate([[v["t"]], Ke, [v["p"]]])
        E = np.zeros((m + 2, m + 2))
        E[0, :] = top
        E[:, 0] = top
        E[1:m + 1, 1:m + 1] = np.eye(m)
        E[m + 1, m + 1] = 1.0
        return -E

    prob.add(contraction, name="contraction")
    prob.add(epigraph, name="epigraph")
    prob.minimize(lambda v: v["t"])
    sol = solve_sdp(prob, tol=tol)
    K = sol.values["K"]
    p = sol.values["p"]
    return ClfQpResult(K, p, float(np.sum((K @ e) ** 2) + p * p), sol.status)


def bregman_adaptation_wrap(base_rate, psi_hessian: Callable[[Array], Array], theta_hat) -> Array:
    """Mirror-descent form: (Hessian of psi at theta_hat)^-1 times the unit-gain adaptation rate."""
    H = np.atleast_2d(psi_hessian(np.asarray(theta_hat, dtype=float)))
    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        raise SingularHessian("potential Hessian is not positive definite")
    if np.min(np.diag(L)) ** 2 < 1e-14 * max(1.0, np.max(np.abs(H))):
        raise SingularHessian("potential Hessian is numerically singular")
    y = np.linalg.solve(L, np.asarray(base_rate, dtype=float))
    return np.linalg.solve(L.T, y)


def l2_potential_hessian(theta):
    return np.eye(np.size(theta))


def quadratic_potential_hessian(D):
    D = np.asarray(D, dtype=float)
    return lambda theta: np.diag(D) if D.ndim == 1 else D


def smoothed_l1_hessian(eps: float):
    """Hessian of sum sqrt(v^2 + eps^2)."""
    def hess(theta):
        th = np.asarray(theta, dtype=float)
        return np.diag(eps**2 / (th**2 + eps**2) ** 1.5)
    return hess
