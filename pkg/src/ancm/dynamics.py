"""Control-affine and parametric system models, SDC factorization, cart-pole.

Every model here is immutable after construction and every operation is a
pure function of its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteDynamics, SingularMass, Unmatched

Array = np.ndarray


@dataclass(frozen=True)
class SystemModel:
    """dx/dt = f(x) + B(x) u on a box domain ``[lo, hi]``.

    ``bounds`` holds declared constants: ``b_bar`` (sup ||B||), ``rho_bar``
    (sup ||R^-1||) and ``d_bar`` (sup ||d||).
    """

    n: int
    m: int
    f: Callable[[Array], Array]
    B: Callable[[Array], Array]
    bounds: dict = field(default_factory=dict)
    lo: Array | None = None
    hi: Array | None = None
    name: str = ""

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got n={self.n}, m={self.m}")

    def rhs(self, x, u):
        return self.f(x) + self.B(x) @ np.atleast_1d(u)

    def sample_domain(self, count: int, rng: np.random.Generator) -> Array:
        if self.lo is None or self.hi is None:
            raise ValueError("system has no declared domain")
        return rng.uniform(self.lo, self.hi, size=(count, self.n))

    def check_bounds(self, points: Array, R: Array | None = None) -> dict:
        """Compare declared bounds with sampled values; returns {name: (declared, sampled)}."""
        b_max = max(np.linalg.norm(self.B(x), 2) for x in points)
        out = {"b_bar": (self.bounds.get("b_bar", np.inf), b_max)}
        if R is not None:
            rinv = np.linalg.norm(np.linalg.inv(np.atleast_2d(R)), 2)
            out["rho_bar"] = (self.bounds.get("rho_bar", np.inf), rinv)
        return out


def jacobian(fun: Callable[[Array], Array], x: Array) -> Array:
    """Central finite-difference Jacobian with step 1e-6 (1 + ||x||)."""
    x = np.asarray(x, dtype=float)
    h = 1e-6 * (1.0 + np.linalg.norm(x))
    f0 = np.asarray(fun(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = h
        J[:, i] = (np.asarray(fun(x + dx)) - np.asarray(fun(x - dx))) / (2 * h)
    return J


_GL_CACHE: dict[int, tuple[Array, Array]] = {}


def _gauss_legendre_01(order: int) -> tuple[Array, Array]:
    if order not in _GL_CACHE:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        _GL_CACHE[order] = (0.5 * (nodes + 1.0), 0.5 * weights)
    return _GL_CACHE[order]


def sdc_matrix(sys: SystemModel, x, x_d, u_d=None, quad_order: int = 8) -> Array:
    """State-dependent coefficient matrix A with A (x - x_d) = fbar(x) - fbar(x_d).

    ``fbar(q) = f(q) + B(q) u_d``; A is the segment average of the Jacobian of
    fbar, integrated by Gauss-Legendre quadrature of order ``quad_order``.
    """
    if quad_order < 2:
        raise ValueError("quad_order must be >= 2")
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.zeros(sys.m) if u_d is None else np.atleast_1d(np.asarray(u_d, dtype=float))

    def fbar(q):
        val = sys.f(q) + sys.B(q) @ u_d
        if not np.all(np.isfinite(val)):
            raise NonFiniteDynamics(f"non-finite dynamics at q={q}")
        return val

    nodes, weights = _gauss_legendre_01(quad_order)
    A = np.zeros((sys.n, sys.n))
    for c, w in zip(nodes, weights):
        A += w * jacobian(fbar, c * x + (1.0 - c) * x_d)
    return A


# ---------------------------------------------------------------------------
# Parametric systems


@dataclass(frozen=True)
class ParametricSystem:
    """f(x, th) = f_known(x) + Y_f(x) Z(th), b_i(x, th) = b_known_i(x) + Y_b_i(x) Z(th).

    The adapted parameter is ``Z(th)`` (dimension ``q_z``), or the augmented
    ``[th; Z(th)]`` when ``augment`` is set, in which case the raw block has a
    zero regressor.  All regressors act linearly on the adapted parameter.
    """

    n: int
    m: int
    p: int
    q_z: int
    f_known: Callable[[Array], Array]
    B_known: Callable[[Array], Array]
    Y_f: Callable[[Array], Array]
    Z: Callable[[Array], Array]
    Y_b: tuple = ()
    augment: bool = False
    bounds: dict = field(default_factory=dict)
    lo: Array | None = None
    hi: Array | None = None
    name: str = ""

    @property
    def dim(self) -> int:
        return self.q_z + self.p if self.augment else self.q_z

    def adapted(self, theta) -> Array:
        z = np.asarray(self.Z(np.asarray(theta, dtype=float)), dtype=float)
        if self.augment:
            return np.concatenate([np.asarray(theta, dtype=float), z])
        return z

    def _zpart(self, th):
        th = np.asarray(th, dtype=float)
        if th.size != self.dim:
            raise ValueError(f"expected adapted parameter of size {self.dim}, got {th.size}")
        return th[-self.q_z:]

    def _pad(self, Y):
        if self.augment:
            return np.hstack([np.zeros((self.n, self.p)), Y])
        return Y

    def f(self, x, th) -> Array:
        return self.f_known(x) + self.Y_f(x) @ self._zpart(th)

    def B(self, x, th) -> Array:
        Bx = np.array(self.B_known(x), dtype=float)
        z = self._zpart(th)
        for i, Yb in enumerate(self.Y_b):
            Bx[:, i] += Yb(x) @ z
        return Bx

    def regressor_f(self, x) -> Array:
        return self._pad(self.Y_f(x))

    def regressor_b(self, x, u) -> Array:
        u = np.atleast_1d(u)
        Y = np.zeros((self.n, self.q_z))
        for i, Yb in enumerate(self.Y_b):
            Y += Yb(x) * u[i]
        return self._pad(Y)

    def model(self, th) -> SystemModel:
        th = np.array(th, dtype=float)
        return SystemModel(
            n=self.n, m=self.m,
            f=lambda x: self.f(x, th),
            B=lambda x: self.B(x, th),
            bounds=dict(self.bounds), lo=self.lo, hi=self.hi,
            name=f"{self.name}@{np.array2string(th, precision=4)}",
        )


@dataclass(frozen=True)
class AffineUncertainSystem:
    """dx/dt = f(x) + B(x) u - Delta(x)^T theta + d(x)."""

    base: SystemModel
    Delta: Callable[[Array], Array]
    theta_bar: float = np.inf
    phi_bar: float = np.inf

    def rhs(self, x, u, theta):
        return self.base.rhs(x, u) - self.Delta(x).T @ np.asarray(theta, dtype=float)


def matched_phi(sys: AffineUncertainSystem, x, x_d, tol: float = 1e-8,
                allow_unmatched: bool = False) -> Array:
    """Regressor phi (p x m) with B(x) phi^T = (Delta(x) - Delta(x_d))^T.

    Solved by least squares.  Raises ``Unmatched`` when the residual exceeds
    ``tol`` unless ``allow_unmatched`` is set (pseudo-inverse use).
    """
    D = (sys.Delta(x) - sys.Delta(x_d)).T
    Bx = sys.base.B(x)
    phiT, *_ = np.linalg.lstsq(Bx, D, rcond=None)
    residual = float(np.linalg.norm(Bx @ phiT - D))
    if residual > tol and not allow_unmatched:
        raise Unmatched(f"matching residual {residual:.3e} exceeds {tol:.1e}", residual)
    return phiT.T


@dataclass(frozen=True)
class LagrangianSystem:
    """H(s) s_dot + h(s) + Delta(s) theta = tau + d(s)."""

    H: Callable[[Array], Array]
    h: Callable[[Array], Array]
    Delta: Callable[[Array], Array]
    delta_bar: float = np.inf
    cond_cap: float = 1e8

    def inertia(self, s) -> Array:
        Hs = np.atleast_2d(self.H(s))
        if np.linalg.cond(Hs) > self.cond_cap:
            raise SingularMass(f"H(s) condition number exceeds {self.cond_cap:.1e}")
        return Hs

    def sdot(self, s, tau, theta, d=None):
        rhs = np.atleast_1d(tau) - self.h(s) - self.Delta(s) @ np.atleast_1d(theta)
        if d is not None:
            rhs = rhs + d
        return np.linalg.solve(self.inertia(s), rhs)

    def as_system(self, n: int) -> SystemModel:
        return SystemModel(
            n=n, m=n,
            f=lambda s: -np.linalg.solve(self.inertia(s), self.h(s)),
            B=lambda s: np.linalg.inv(self.inertia(s)),
        )


@dataclass(frozen=True)
class BasisFunctionModel:
    """dx/dt ~ F phi(x) + sum_i B_i varphi_i(x) u_i with weight estimates."""

    F_hat: Array
    B_hat: tuple
    phi: Callable[[Array], Array]
    varphi: tuple
    zeta_bar: float = np.inf
    d_M_bar: float = np.inf

    @property
    def n(self) -> int:
        return self.F_hat.shape[0]

    @property
    def m(self) -> int:
        return len(self.B_hat)

    def with_weights(self, F_hat, B_hat) -> "BasisFunctionModel":
        return replace(self, F_hat=np.asarray(F_hat), B_hat=tuple(np.asarray(b) for b in B_hat))

    def input_matrix(self, x) -> Array:
        return np.column_stack([Bi @ vp(x) for Bi, vp in zip(self.B_hat, self.varphi)])

    def as_system(self) -> SystemModel:
        return SystemModel(n=self.n, m=self.m, f=lambda x: self.F_hat @ self.phi(x),
                           B=self.input_matrix)


def basis_model_eval(bm: BasisFunctionModel, x, u) -> Array:
    u = np.atleast_1d(u)
    out = bm.F_hat @ bm.phi(x)
    for i, (Bi, vp) in enumerate(zip(bm.B_hat, bm.varphi)):
        out = out + (Bi @ vp(x)) * u[i]
    return out


# ---------------------------------------------------------------------------
# Cart-pole


@dataclass(frozen=True)
class CartPole:
    """Cart-pole with cart and pole drags; state (p, theta, p_dot, theta_dot)."""

    g: float = 9.8
    m_c: float = 1.0
    m: float = 0.1
    mu_c: float = 0.5
    mu_p: float = 0.002
    l: float = 0.5

    def __post_init__(self):
        if min(self.m_c, self.m, self.l) <= 0:
            raise ValueError("masses and pole length must be strictly positive")

    def mass_matrix(self, theta: float) -> Array:
        ml = self.m * self.l
        c = np.cos(theta)
        Mm = np.array([[self.m_c + self.m, ml * c],
                       [ml * c, 4.0 / 3.0 * ml * self.l]])
        if abs(Mm[0, 0] * Mm[1, 1] - Mm[0, 1] ** 2) < 1e-12:
            raise SingularMass(f"cart-pole mass matrix singular at theta={theta}")
        return Mm

    def mass_inverse(self, theta: float) -> Array:
        """Closed-form inverse of the 2 x 2 mass matrix."""
        ml = self.m * self.l
        a, b, d = self.m_c + self.m, ml * np.cos(theta), 4.0 / 3.0 * ml * self.l
        det = a * d - b * b
        if abs(det) < 1e-12:
            raise SingularMass(f"cart-pole mass matrix singular at theta={theta}")
        return np.array([[d, -b], [-b, a]]) / det

    def energy(self, x) -> float:
        _, th, pd, thd = x
        ml = self.m * self.l
        kinetic = (0.5 * (self.m_c + self.m) * pd**2 + ml * pd * thd * np.cos(th)
                   + 0.5 * 4.0 / 3.0 * ml * self.l * thd**2)
        return float(kinetic + ml * self.g * np.cos(th))


DEFAULT_CARTPOLE_LO = np.array([-1.5, -0.6, -1.5, -1.5])
DEFAULT_CARTPOLE_HI = -DEFAULT_CARTPOLE_LO


def _cartpole_forces(cp: CartPole, x, u, mu_c, mu_p):
    _, th, pd, thd = x
    ml = cp.m * cp.l
    return np.array([ml * thd**2 * np.sin(th) - mu_c * pd + u,
                     ml * cp.g * np.sin(th) - mu_p * thd])


def eval_cartpole(cp: CartPole, x, u=0.0) -> Array:
    """Time derivative of the cart-pole state under horizontal force ``u``.

    Scalar arithmetic with the closed-form 2 x 2 inverse; this is the inner
    loop of every simulation and of iLQR.
    """
    _, th, pd, thd = np.asarray(x, dtype=float).tolist()
    u = float(u[0]) if np.ndim(u) else float(u)
    ml = cp.m * cp.l
    s, c = math.sin(th), math.cos(th)
    a, b, d = cp.m_c + cp.m, ml * c, 4.0 / 3.0 * ml * cp.l
    det = a * d - b * b
    if not abs(det) >= 1e-12:
        raise SingularMass(f"cart-pole mass matrix singular at theta={th}")
    f1 = ml * thd * thd * s - cp.mu_c * pd + u
    f2 = ml * cp.g * s - cp.mu_p * thd
    return np.array([pd, thd, (d * f1 - b * f2) / det, (a * f2 - b * f1) / det])


def cartpole_input_matrix(cp: CartPole, x) -> Array:
    col = cp.mass_inverse(x[1])[:, 0]
    return np.array([[0.0], [0.0], [col[0]], [col[1]]])


def cartpole_regressors(cp: CartPole, x) -> tuple[Array, Array]:
    """Drag regressor Y_f (4 x 2) with f(x, th) = f(x, 0) + Y_f(x) th, th = (mu_c, mu_p)."""
    x = np.asarray(x, dtype=float)
    Minv = cp.mass_inverse(x[1])
    Y = np.zeros((4, 2))
    Y[2:, 0] = -Minv[:, 0] * x[2]
    Y[2:, 1] = -Minv[:, 1] * x[3]
    return Y, np.array([cp.mu_c, cp.mu_p])


def cartpole_model(cp: CartPole, lo=None, hi=None, d_bar: float = 0.0) -> SystemModel:
    """True cart-pole dynamics as a control-affine SystemModel."""
    lo = DEFAULT_CARTPOLE_LO if lo is None else np.asarray(lo, dtype=float)
    hi = DEFAULT_CARTPOLE_HI if hi is None else np.asarray(hi, dtype=float)
    return SystemModel(
        n=4, m=1,
        f=lambda x: eval_cartpole(cp, x, 0.0),
        B=lambda x: cartpole_input_matrix(cp, x),
        bounds={"b_bar": cartpole_b_bar(cp, lo, hi), "rho_bar": 1.0, "d_bar": d_bar},
        lo=lo, hi=hi, name="cartpole",
    )


def cartpole_b_bar(cp: CartPole, lo, hi, count: int = 201) -> float:
    """sup ||B(x)|| over the theta range of the box (B depends on theta only)."""
    ths = np.linspace(lo[1], hi[1], count)
    return float(max(np.linalg.norm(cartpole_input_matrix(cp, [0, t, 0, 0])) for t in ths))


def cartpole_parametric(cp: CartPole, lo=None, hi=None) -> ParametricSystem:
    """Cart-pole with unknown drags (mu_c, mu_p) entering linearly."""
    free = replace(cp, mu_c=0.0, mu_p=0.0)
    lo = DEFAULT_CARTPOLE_LO if lo is None else np.asarray(lo, dtype=float)
    hi = DEFAULT_CARTPOLE_HI if hi is None else np.asarray(hi, dtype=float)
    return ParametricSystem(
        n=4, m=1, p=2, q_z=2,
        f_known=lambda x: eval_cartpole(free, x, 0.0),
        B_known=lambda x: cartpole_input_matrix(cp, x),
        Y_f=lambda x: cartpole_regressors(cp, x)[0],
        Z=lambda th: np.asarray(th, dtype=float),
        bounds={"b_bar": cartpole_b_bar(cp, lo, hi), "rho_bar": 1.0},
        lo=lo, hi=hi, name="cartpole-drag",
    )


def cartpole_affine(cp: CartPole, lo=None, hi=None) -> AffineUncertainSystem:
    """Drag uncertainty in the affine form f - Delta^T theta, Delta = -Y_f^T."""
    free = replace(cp, mu_c=0.0, mu_p=0.0)
    base = cartpole_model(free, lo, hi)
    return AffineUncertainSystem(base=base, Delta=lambda x: -cartpole_regressors(cp, x)[0].T)


def stack_inputs(x, x_d, theta_hat=None) -> Array:
    parts = [np.atleast_1d(x), np.atleast_1d(x_d)]
    if theta_hat is not None:
        parts.append(np.atleast_1d(theta_hat))
    return np.concatenate(parts).astype(float)


def box_points(lo: Sequence[float], hi: Sequence[float], counts: Sequence[int]) -> Array:
    """Lattice points of an axis-aligned box in lexicographic order."""
    axes = [np.linspace(a, b, c) if c > 1 else np.array([0.5 * (a + b)])
            for a, b, c in zip(lo, hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)
