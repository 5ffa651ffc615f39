"""Iterative LQR on a discretized model and a receding-horizon wrapper."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import jacobian
from .errors import LineSearchFailed

Array = np.ndarray


def rk4_discretize(f, dt: float):
    """Discrete map x_{k+1} = F(x_k, u_k) of ``x' = f(x, u)`` with zero-order-hold input."""
    def step(x, u):
        k1 = f(x, u)
        k2 = f(x + 0.5 * dt * k1, u)
        k3 = f(x + 0.5 * dt * k2, u)
        k4 = f(x + dt * k3, u)
        return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return step


@dataclass
class IlqrResult:
    xs: Array   # (N+1, n) nominal states
    us: Array   # (N, m) nominal inputs
    Ks: Array   # (N, m, n) feedback gains
    cost: float
    iterations: int
    converged: bool

    def policy(self, k: int, x) -> Array:
        k = min(k, len(self.us) - 1)
        return self.us[k] + self.Ks[k] @ (np.asarray(x) - self.xs[k])


def _cost(xs, us, Q, R, Qf, x_ref):
    dx = xs - x_ref
    return float(0.5 * np.einsum("ki,ij,kj->", dx[:-1], Q, dx[:-1])
                 + 0.5 * np.einsum("ki,ij,kj->", us, R, us)
                 + 0.5 * dx[-1] @ Qf @ dx[-1])


def _rollout(step, x0, us):
    xs = np.empty((len(us) + 1, x0.size))
    xs[0] = x0
    for k, u in enumerate(us):
        xs[k + 1] = step(xs[k], u)
    return xs


def _linearize(step, x, u):
    A = jacobian(lambda z: step(z, u), x)
    B = jacobian(lambda v: step(x, v), u)
    return A, B


def ilqr(step, x0, horizon: int, Q, R, Qf=None, us0=None, x_ref=None, tol: float = 1e-8,
         max_iter: int = 100, mu0: float = 0.0) -> IlqrResult:
    """Minimize sum 0.5 (x-x_ref)^T Q (x-x_ref) + 0.5 u^T R u + terminal term.

    Standard backward pass on the Q-function with Levenberg regularization
    ``mu`` and a backtracking forward pass.  Stops when the cost decrease
    falls below ``tol``.  Raises LineSearchFailed (with the best iterate)
    when no step size reduces the cost and regularization saturates.
    """
    x0 = np.asarray(x0, dtype=float)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    Qf = Q if Qf is None else np.atleast_2d(Qf)
    n, m = x0.size, R.shape[0]
    x_ref = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
    us = np.zeros((horizon, m)) if us0 is None else np.array(us0, dtype=float).reshape(horizon, m)
    xs = _rollout(step, x0, us)
    J = _cost(xs, us, Q, R, Qf, x_ref)
    Ks = np.zeros((horizon, m, n))
    mu = mu0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lin = [_linearize(step, xs[k], us[k]) for k in range(horizon)]
        while True:
            ks, Ks_new, ok = _backward(lin, xs, us, Q, R, Qf, x_ref, mu)
            if ok:
                break
            mu = max(1e-6, 10 * mu)
            if mu > 1e10:
                raise LineSearchFailed("backward pass not positive definite", IlqrResult(xs, us, Ks, J, it, False))
        accepted = False
        for a in 0.5 ** np.arange(12):
            xs_new = np.empty_like(xs)
            us_new = np.empty_like(us)
            xs_new[0] = x0
            for k in range(horizon):
                us_new[k] = us[k] + a * ks[k] + Ks_new[k] @ (xs_new[k] - xs[k])
                xs_new[k + 1] = step(xs_new[k], us_new[k])
            if not np.all(np.isfinite(xs_new)):
                continue
            J_new = _cost(xs_new, us_new, Q, R, Qf, x_ref)
            if J_new <= J:
                accepted = True
                break
        if not accepted:
            mu = max(1e-6, 10 * mu)
            if mu > 1e10:
                raise LineSearchFailed("no cost decrease along the iLQR direction",
                                       IlqrResult(xs, us, Ks, J, it, False))
            continue
        dJ = J - J_new
        xs, us, Ks, J = xs_new, us_new, Ks_new, J_new
        mu = mu / 10 if mu > 1e-6 else 0.0
        if dJ < tol:
            converged = True
            break
    # gains refreshed at the final nominal so the policy matches the returned trajectory
    lin = [_linearize(step, xs[k], us[k]) for k in range(horizon)]
    _, Ks, _ = _backward(lin, xs, us, Q, R, Qf, x_ref, 0.0)
    return IlqrResult(xs, us, Ks, J, it, converged)


def _backward(lin, xs, us, Q, R, Qf, x_ref, mu):
    N = len(lin)
    n = xs.shape[1]
    m = us.shape[1]
    Vx = Qf @ (xs[-1] - x_ref)
    Vxx = Qf.copy()
    ks = np.zeros((N, m))
    Ks = np.zeros((N, m, n))
    for k in range(N - 1, -1, -1):
        A, B = lin[k]
        Qx = Q @ (xs[k] - x_ref) + A.T @ Vx
        Qu = R @ us[k] + B.T @ Vx
        Qxx = Q + A.T @ Vxx @ A
        Quu = R + B.T @ (Vxx + mu * np.eye(n)) @ B
        Qux = B.T @ (Vxx + mu * np.eye(n)) @ A
        Quu = 0.5 * (Quu + Quu.T)
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            return ks, Ks, False
        ks[k] = -np.linalg.solve(L.T, np.linalg.solve(L, Qu))
        Ks[k] = -np.linalg.solve(L.T, np.linalg.solve(L, Qux))
        Vx = Qx + Ks[k].T @ Quu @ ks[k] + Ks[k].T @ Qu + Qux.T @ ks[k]
        Vxx = Qxx + Ks[k].T @ Quu @ Ks[k] + Ks[k].T @ Qux + Qux.T @ Ks[k]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return ks, Ks, True


def riccati_gains(A, B, Q, R, Qf, horizon: int) -> Array:
    """Finite-horizon discrete Riccati recursion; gains K_k with u_k = K_k x_k."""
    P = np.atleast_2d(Qf)
    Ks = np.zeros((horizon, B.shape[1], A.shape[0]))
    for k in range(horizon - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        Ks[k] = K
        P = Q + A.T @ P @ (A + B @ K)
        P = 0.5 * (P + P.T)
    return Ks


def ilqr_baseline(f, x0, horizon: int, dt: float, Q, R, Qf=None, **kw) -> IlqrResult:
    """iLQR on the RK4 discretization of the continuous model ``f(x, u)``."""
    return ilqr(rk4_discretize(f, dt), x0, horizon, Q, R, Qf, **kw)


class RecedingHorizonIlqr:
    """Replans every ``replan`` steps from the measured state with a warm start.

    Between replans the latest plan is tracked with its time-varying gains.
    """

    def __init__(self, f, dt: float, horizon: int, Q, R, Qf=None, replan: int = 10, max_iter: int = 30):
        self.step = rk4_discretize(f, dt)
        self.dt, self.horizon, self.replan = dt, horizon, replan
        self.Q, self.R, self.Qf = Q, R, Qf
        self.max_iter = max_iter
        self.plan = None
        self.t_plan = 0.0

    def _solve(self, x, us0):
        try:
            return ilqr(self.step, x, self.horizon, self.Q, self.R, self.Qf, us0=us0, max_iter=self.max_iter)
        except LineSearchFailed as exc:
            return exc.result

    def __call__(self, t: float, x) -> Array:
        k = int(np.floor((t - self.t_plan) / self.dt + 1e-9))
        if self.plan is None or k >= self.replan:
            us0 = None
            if self.plan is not None:
                shift = min(k, self.horizon)
                us0 = np.vstack([self.plan.us[shift:], np.repeat(self.plan.us[-1:], shift, axis=0)])
            self.plan = self._solve(np.asarray(x, dtype=float), us0)
            self.t_plan = t
            k = 0
        return self.plan.policy(k, x)
