"""Small dense semidefinite programming.

Problems have a linear objective over symmetric-matrix, scalar and free
variables and affine matrix inequalities ``F(v) + eta I <= 0``.  The solver is
a log-det barrier method: a phase-I problem finds a strictly feasible point,
then damped Newton centering runs with the barrier weight increased tenfold
per outer step.  Independent verification uses a cyclic Jacobi eigensolver so
that feasibility checks never share code with the solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import MaxIterations, NotSymmetric

Array = np.ndarray


# ---------------------------------------------------------------------------
# Jacobi eigensolver


def jacobi_eig(S, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[Array, Array]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    A = np.array(S, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-12 * scale:
        raise NotSymmetric("matrix is not symmetric to 1e-12")
    A = 0.5 * (A + A.T)
    k = A.shape[0]
    V = np.eye(k)
    fro = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * max(fro, 1e-300):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w)
    return w[order], V[:, order]


def min_eig(S) -> float:
    """Smallest eigenvalue of a symmetric matrix (cyclic Jacobi)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape == (1, 1):
        return float(S[0, 0])
    return float(jacobi_eig(S)[0][0])


def max_eig(S) -> float:
    return -min_eig(-np.atleast_2d(np.asarray(S, dtype=float)))


# ---------------------------------------------------------------------------
# Problem description


@dataclass
class Variable:
    name: str
    kind: str  # "sym", "nonneg", "free", "matrix"
    shape: tuple
    offset: int = 0

    @property
    def size(self) -> int:
        if self.kind == "sym":
            k = self.shape[0]
            return k * (k + 1) // 2
        return int(np.prod(self.shape)) if self.shape else 1

    def unpack(self, z: Array):
        seg = z[self.offset:self.offset + self.size]
        if self.kind == "sym":
            k = self.shape[0]
            M = np.zeros((k, k))
            iu = np.triu_indices(k)
            M[iu] = seg
            return M + np.triu(M, 1).T
        if self.kind == "matrix":
            return seg.reshape(self.shape).copy()
        return float(seg[0])

    def pack(self, value, z: Array):
        if self.kind == "sym":
            z[self.offset:self.offset + self.size] = np.asarray(value)[np.triu_indices(self.shape[0])]
        elif self.kind == "matrix":
            z[self.offset:self.offset + self.size] = np.asarray(value).ravel()
        else:
            z[self.offset] = float(value)


@dataclass
class Constraint:
    fun: Callable[[dict], Array]
    margin: float = 0.0
    name: str = ""


@dataclass
class LmiProblem:
    """Decision variables, a linear objective and affine LMIs ``F(v) <= -margin I``."""

    variables: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    objective: Callable[[dict], float] | None = None

    @property
    def nvar(self) -> int:
        return sum(v.size for v in self.variables)

    def _add_var(self, name, kind, shape):
        if any(v.name == name for v in self.variables):
            raise ValueError(f"duplicate variable {name!r}")
        var = Variable(name, kind, shape, offset=self.nvar)
        self.variables.append(var)
        return var

    def sym(self, name: str, k: int) -> Variable:
        if not 1 <= k <= 10:
            raise ValueError("matrix variables are limited to 1 <= k <= 10")
        return self._add_var(name, "sym", (k, k))

    def nonneg(self, name: str) -> Variable:
        return self._add_var(name, "nonneg", ())

    def free(self, name: str) -> Variable:
        return self._add_var(name, "free", ())

    def matrix(self, name: str, rows: int, cols: int) -> Variable:
        return self._add_var(name, "matrix", (rows, cols))

    def add(self, fun: Callable[[dict], Array], margin: float = 0.0, name: str = "") -> None:
        if margin < 0:
            raise ValueError("constraint margin must be nonnegative")
        self.constraints.append(Constraint(fun, margin, name or f"c{len(self.constraints)}"))

    def minimize(self, fun: Callable[[dict], float]) -> None:
        self.objective = fun

    def unpack(self, z: Array) -> dict:
        return {v.name: v.unpack(z) for v in self.variables}

    def pack(self, values: dict) -> Array:
        z = np.zeros(self.nvar)
        for v in self.variables:
            v.pack(values[v.name], z)
        return z


@dataclass
class SdpSolution:
    values: dict
    objective: float
    worst_margin: float
    status: str  # "optimal" | "infeasible" | "max-iter"
    iterations: int = 0
    margins: tuple = ()


@dataclass
class LmiReport:
    eigs: tuple
    names: tuple
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.eigs) if self.eigs else -np.inf


# ---------------------------------------------------------------------------
# Compilation into affine coefficient arrays


@dataclass
class _Group:
    """J constraints of size k: F0 + sum_i z_i Fz[:, i] <= 0 (margins folded into F0)."""

    F0: Array  # (J, k, k)
    Fz: Array  # (J, N, k, k)
    index: list


def _affine_coefficients(fun, N, unpack, rng):
    z0 = np.zeros(N)
    F0 = np.atleast_2d(np.asarray(fun(unpack(z0)), dtype=float))
    k = F0.shape[0]
    Fz = np.empty((N, k, k))
    for i in range(N):
        e = np.zeros(N)
        e[i] = 1.0
        Fz[i] = np.atleast_2d(np.asarray(fun(unpack(e)), dtype=float)) - F0
    # randomized two-point affinity check
    z1, z2 = rng.standard_normal(N), rng.standard_normal(N)
    a = rng.uniform(0.2, 0.8)
    lhs = np.atleast_2d(np.asarray(fun(unpack(a * z1 + (1 - a) * z2)), dtype=float))
    rhs = F0 + np.tensordot(a * z1 + (1 - a) * z2, Fz, axes=1)
    scale = 1.0 + np.abs(F0).max() + np.abs(Fz).max(initial=0.0) * (1 + np.abs(z1).max() + np.abs(z2).max())
    if np.max(np.abs(lhs - rhs)) > 1e-9 * scale:
        raise ValueError("constraint map is not affine in the decision variables")
    if np.max(np.abs(F0 - F0.T)) > 1e-12 * scale or np.max(np.abs(Fz - Fz.transpose(0, 2, 1)), initial=0) > 1e-12 * scale:
        raise NotSymmetric("constraint map does not produce symmetric matrices")
    return F0, Fz


def _compile(prob: LmiProblem, seed: int = 0):
    if prob.objective is None:
        raise ValueError("problem has no objective")
    N = prob.nvar
    rng = np.random.default_rng(seed)
    blocks = {}
    entries = []
    for ci, con in enumerate(prob.constraints):
        F0, Fz = _affine_coefficients(con.fun, N, prob.unpack, rng)
        F0 = F0 + con.margin * np.eye(F0.shape[0])
        entries.append((F0, Fz, ci))
    for var in prob.variables:
        if var.kind == "nonneg":
            Fz = np.zeros((N, 1, 1))
            Fz[var.offset, 0, 0] = -1.0
            entries.append((np.zeros((1, 1)), Fz, -1))
    for F0, Fz, ci in entries:
        k = F0.shape[0]
        g = blocks.setdefault(k, ([], [], []))
        g[0].append(F0)
        g[1].append(Fz)
        g[2].append(ci)
    groups = [_Group(np.array(a), np.array(b), c) for a, b, c in blocks.values()]
    c0 = float(prob.objective(prob.unpack(np.zeros(N))))
    c = np.array([float(prob.objective(prob.unpack(np.eye(N)[i]))) - c0 for i in range(N)])
    return groups, c0, c


# ---------------------------------------------------------------------------
# Barrier machinery


def _chol_slacks(groups, z):
    """Cholesky factors of S = -(F0 + sum z_i F_i) per group, or None if any is not PD."""
    out = []
    for g in groups:
        S = -(g.F0 + np.tensordot(z, g.Fz, axes=([0], [1])))
        try:
            out.append(np.linalg.cholesky(S))
        except np.linalg.LinAlgError:
            return None
    return out


def _barrier_value(t, c, z, chols):
    val = t * float(c @ z)
    for L in chols:
        val -= 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)))
    return val


def _barrier_derivatives(t, c, groups, chols):
    N = c.size
    grad = t * c.copy()
    hess = np.zeros((N, N))
    for g, L in zip(groups, chols):
        Linv = np.linalg.inv(L)
        G = np.einsum("jab,jibc,jdc->jiad", Linv, g.Fz, Linv, optimize=True)
        grad += np.einsum("jiaa->i", G)
        Gf = G.reshape(G.shape[0], N, -1)
        hess += np.einsum("jak,jbk->ab", Gf, Gf, optimize=True)
    return grad, hess


def _newton_center(t, c, groups, z, max_steps, eps=1e-7, stop=None):
    """Damped Newton minimization of t c'z - sum logdet S(z). Returns (z, steps, converged).

    Far from the center the step is the self-concordant damped step
    1/(1+lambda), which stays strictly feasible and decreases the barrier
    without comparing barrier values (those lose precision when thousands of
    log terms are summed).  Close to the center a backtracking search on the
    barrier value takes over.  ``stop(z)`` ends the loop early.
    """
    chols = _chol_slacks(groups, z)
    f = _barrier_value(t, c, z, chols)
    for step in range(1, max_steps + 1):
        grad, hess = _barrier_derivatives(t, c, groups, chols)
        scale = np.sqrt(np.maximum(np.diag(hess), 1e-300))
        Hs = hess / np.outer(scale, scale)
        try:
            dz = -np.linalg.solve(Hs, grad / scale) / scale
        except np.linalg.LinAlgError:
            dz = -np.linalg.lstsq(Hs, grad / scale, rcond=None)[0] / scale
        dec = float(-grad @ dz)
        if not np.isfinite(dec):
            return z, step, False
        if dec / 2.0 <= eps:
            # includes a slightly negative decrement from roundoff at tight centering
            return z, step, True
        lam = np.sqrt(dec)
        if lam > 0.25:
            s = 1.0 / (1.0 + lam)
            zn = z + s * dz
            cn = _chol_slacks(groups, zn)
            while cn is None and s > 1e-12:
                s *= 0.5
                zn = z + s * dz
                cn = _chol_slacks(groups, zn)
            if cn is None:
                return z, step, False
            fn = _barrier_value(t, c, zn, cn)
        else:
            s = 1.0
            while s > 1e-8:
                zn = z + s * dz
                cn = _chol_slacks(groups, zn)
                if cn is not None:
                    fn = _barrier_value(t, c, zn, cn)
                    if fn <= f - 0.01 * s * dec:
                        break
                s *= 0.5
            else:
                # stalled at working precision: the iterate is as centered as it gets
                return z, step, True
        if s * np.linalg.norm(dz) <= 1e-13 * (1.0 + np.linalg.norm(z)):
            return zn, step, True
        z, chols, f = zn, cn, fn
        if stop is not None and stop(z):
            return z, step, True
    return z, max_steps, False


def _barrier_solve(groups, c, z, tol, max_iter, stop=None, center_steps=200):
    """Barrier path following from a strictly feasible z. Returns (z, iterations, converged).

    When centering stalls at a large barrier weight (ill-conditioned slacks),
    the previous centered iterate is accepted if its duality gap is already
    within 100 tol; otherwise the run is reported as not converged.
    """
    m_total = sum(g.F0.shape[0] * g.F0.shape[1] for g in groups)
    total = 0
    t = max(1.0, m_total / (1.0 + abs(float(c @ z))))
    prev = None
    while True:
        # the first centering starts far from the path and may take many damped steps
        cap = max_iter if prev is None else center_steps
        budget = min(cap, max(1, max_iter - total))
        zn, steps, ok = _newton_center(t, c, groups, z, max_steps=budget, stop=stop)
        total += steps
        gap_scale = 1.0 + abs(float(c @ zn))
        if not ok:
            if prev is not None and m_total / (t / 10.0) < 100.0 * tol * gap_scale:
                return prev, total, True
            return zn, total, False
        z = zn
        if stop is not None and stop(z):
            return z, total, True
        if m_total / t < tol * gap_scale:
            return z, total, True
        if total >= max_iter:
            return z, total, False
        prev = z
        t *= 10.0


def _phase_one(groups, N, tol, max_iter, box):
    """Find z with every slack strictly PD, or report the best max-margin value."""
    z0 = np.zeros(N)
    worst = max(np.linalg.eigvalsh(g.F0).max() for g in groups)
    s0 = max(worst, 0.0) + 1.0
    aug = []
    for g in groups:
        k = g.F0.shape[1]
        J = g.F0.shape[0]
        Fs = np.broadcast_to(-np.eye(k), (J, 1, k, k))
        aug.append(_Group(g.F0, np.concatenate([g.Fz, Fs], axis=1), g.index))
    # box |z_i| <= box and s >= -1 keep the auxiliary problem bounded
    Fb = np.zeros((2 * N + 1, N + 1, 1, 1))
    F0b = np.zeros((2 * N + 1, 1, 1))
    for i in range(N):
        Fb[2 * i, i] = 1.0
        Fb[2 * i + 1, i] = -1.0
        F0b[2 * i] = F0b[2 * i + 1] = -box
    Fb[2 * N, N] = -1.0
    F0b[2 * N] = -1.0
    merged = aug + [_Group(F0b, Fb, [])]
    cs = np.zeros(N + 1)
    cs[N] = 1.0
    w0 = np.concatenate([z0, [s0]])
    w, iters, ok = _barrier_solve(merged, cs, w0, tol, max_iter, stop=lambda w: w[-1] < -1e-6,
                                  center_steps=max_iter)
    return w[:N], float(w[-1]), iters, ok


def solve_sdp(p: LmiProblem, tol: float = 1e-8, max_iter: int = 400,
              box: float = 1e5, seed: int = 0) -> SdpSolution:
    """Minimize the objective of ``p`` subject to its LMIs.

    ``tol`` bounds the barrier duality gap.  Returns status ``infeasible`` when
    the auxiliary max-margin problem cannot push every constraint below
    ``-tol``; raises ``MaxIterations`` (carrying the best iterate) when Newton
    centering fails to converge within ``max_iter`` total steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    groups, c0, c = _compile(p, seed)
    N = p.nvar
    z, s, it1, ok1 = _phase_one(groups, N, tol, max_iter, box)
    if s > -tol and not ok1:
        sol = SdpSolution(p.unpack(z), float(c0 + c @ z), s, "max-iter", it1)
        raise MaxIterations(f"feasibility search did not converge in {max_iter} Newton steps", sol)
    if s > -tol or _chol_slacks(groups, z) is None:
        return SdpSolution(p.unpack(z), float(c0 + c @ z), s, "infeasible", it1)
    z, it2, ok = _barrier_solve(groups, c, z, tol, max_iter)
    values = p.unpack(z)
    margins = _constraint_eigs(p, values)
    sol = SdpSolution(values, float(c0 + c @ z), max(margins, default=-np.inf),
                      "optimal" if ok else "max-iter", it1 + it2, tuple(margins))
    if not ok:
        raise MaxIterations(f"barrier loop did not converge in {max_iter} Newton steps", sol)
    return sol


def _constraint_eigs(p: LmiProblem, values: dict) -> list:
    return [float(np.linalg.eigvalsh(np.atleast_2d(con.fun(values))).max()) for con in p.constraints]


def check_lmi(p: LmiProblem, candidate: dict, margin: float = 0.0) -> LmiReport:
    """Most-positive eigenvalue of each constraint at ``candidate`` (Jacobi, solver-free).

    Passes iff every eigenvalue is at most ``-margin``.
    """
    eigs = tuple(max_eig(np.atleast_2d(con.fun(candidate))) for con in p.constraints)
    names = tuple(con.name for con in p.constraints)
    return LmiReport(eigs, names, all(e <= -margin for e in eigs))


def dump_problem(p: LmiProblem, path, solution: SdpSolution | None = None) -> None:
    """Write the compiled affine data (and optionally a solution) as plain text."""
    groups, c0, c = _compile(p)
    with open(path, "w") as fh:
        fh.write(f"# variables {p.nvar}\n")
        for v in p.variables:
            fh.write(f"var {v.name} {v.kind} {' '.join(map(str, v.shape))} offset {v.offset}\n")
        fh.write("objective " + " ".join(f"{x:.17g}" for x in np.concatenate([[c0], c])) + "\n")
        for g in groups:
            for j in range(g.F0.shape[0]):
                k = g.F0.shape[1]
                fh.write(f"lmi {k}\n")
                for mat in [g.F0[j]] + list(g.Fz[j]):
                    fh.write(" ".join(f"{x:.17g}" for x in mat.ravel()) + "\n")
        if solution is not None:
            fh.write(f"status {solution.status}\nobjective_value {solution.objective:.17g}\n")
            fh.write("z " + " ".join(f"{x:.17g}" for x in p.pack(solution.values)) + "\n")
