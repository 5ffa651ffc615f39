"""Sampling optimal contraction metrics by convex optimization.

At each sample point the program

    min  chi   s.t.  2 sym(A W) - 2 nu B R^-1 B^T <= -2 (alpha + margin) W,
                     I <= W <= chi I,  nu >= nu_min

is solved for the scaled dual metric W, giving M = nu W^-1 with bounds
1/nu and chi/nu.  ``uniform`` mode shares one constant W over all points
(so its time derivative vanishes identically); ``quasi-static`` mode solves
each point on its own and relies on ``margin`` to cover the dropped
derivative term.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import ParametricSystem, SystemModel, box_points, sdc_matrix
from .errors import EmptyDataset, Infeasible
from .lmi import LmiProblem, check_lmi, max_eig, solve_sdp

Array = np.ndarray

NU_MIN = 1e-6


@dataclass(frozen=True)
class Grid:
    """Axis-aligned lattice over the stacked vector (x, x_d, theta_hat).

    Axes not listed in ``axes`` stay at the matching entry of ``center``.
    """

    center: tuple
    axes: dict = field(default_factory=dict)  # index -> (lo, hi, count)

    def points(self) -> Array:
        c = np.asarray(self.center, dtype=float)
        lo, hi, counts = c.copy(), c.copy(), np.ones(c.size, dtype=int)
        for i, (a, b, k) in self.axes.items():
            if int(k) < 1:
                raise ValueError(f"grid axis {i} has no points")
            lo[i], hi[i], counts[i] = a, b, k
        pts = box_points(lo, hi, counts)
        if len(pts) == 0:
            raise ValueError("grid is empty")
        return pts


@dataclass(frozen=True)
class SynthesisConfig:
    alpha: float
    R: Array
    grid: Grid | None = None
    mode: str = "quasi-static"
    margin: float = 0.0
    d_bar: float = 1.0
    nu_weight: float = 1e-3
    tol: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.mode not in ("uniform", "quasi-static"):
            raise ValueError(f"unknown synthesis mode {self.mode!r}")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        object.__setattr__(self, "R", R)
        if np.max(np.abs(R - R.T)) > 1e-12 or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")


@dataclass
class MetricSample:
    x: Array
    x_d: Array
    theta_hat: Array | None
    W_bar: Array
    nu: float
    chi: float
    margins: dict
    objective: float

    @property
    def M(self) -> Array:
        return self.nu * np.linalg.inv(self.W_bar)

    @property
    def omega_lower(self) -> float:
        return 1.0 / self.nu

    @property
    def omega_upper(self) -> float:
        return self.chi / self.nu


@dataclass
class DatasetSummary:
    total: int
    feasible: int
    infeasible_points: list
    chi: float
    omega_lower: float
    omega_upper: float


# ---------------------------------------------------------------------------


def _contraction_block(A, BRB, alpha):
    def F(v):
        W = v["W"]
        AW = A @ W
        return AW + AW.T - 2.0 * v["nu"] * BRB + 2.0 * alpha * W
    return F


def contraction_lhs(A, B, R, W, nu, alpha) -> Array:
    """2 sym(A W) - 2 nu B R^-1 B^T + 2 alpha W (must be <= 0)."""
    BRB = B @ np.linalg.solve(np.atleast_2d(R), B.T)
    AW = A @ W
    return AW + AW.T - 2.0 * nu * BRB + 2.0 * alpha * W


def _metric_problem(blocks, n, cfg: SynthesisConfig):
    """LMI program with one shared (W, nu, chi) and one contraction block per (A, B)."""
    prob = LmiProblem()
    prob.sym("W", n)
    prob.nonneg("nu")
    prob.nonneg("chi")
    rate = cfg.alpha + cfg.margin
    for j, (A, B) in enumerate(blocks):
        BRB = B @ np.linalg.solve(cfg.R, B.T)
        prob.add(_contraction_block(A, BRB, rate), name=f"contraction{j}")
    I = np.eye(n)
    prob.add(lambda v: I - v["W"], name="lower")
    prob.add(lambda v: v["W"] - v["chi"] * I, name="upper")
    prob.add(lambda v: np.array([[NU_MIN - v["nu"]]]), name="nu_min")
    prob.minimize(lambda v: v["chi"] + cfg.nu_weight * v["nu"])
    return prob


def _solve_metric(blocks, n, cfg):
    prob = _metric_problem(blocks, n, cfg)
    sol = solve_sdp(prob, tol=cfg.tol)
    if sol.status == "infeasible":
        raise Infeasible(f"contraction program infeasible (max margin {sol.worst_margin:.3e})",
                         sol.worst_margin)
    v = sol.values
    return v["W"], max(v["nu"], NU_MIN), v["chi"]


def verify_sample(A, B, R, W, nu, chi, alpha) -> dict:
    """Solver-free eigenvalue re-check of one sample (Jacobi eigensolver)."""
    n = W.shape[0]
    return {
        "contraction": max_eig(contraction_lhs(A, B, R, W, nu, alpha)),
        "lower": max_eig(np.eye(n) - W),
        "upper": max_eig(W - chi * np.eye(n)),
    }


def _sample(sys: SystemModel, cfg, x, x_d, u_d, theta_hat):
    A = sdc_matrix(sys, x, x_d, u_d)
    B = sys.B(x)
    W, nu, chi = _solve_metric([(A, B)], sys.n, cfg)
    return MetricSample(
        x=np.array(x, dtype=float), x_d=np.array(x_d, dtype=float),
        theta_hat=None if theta_hat is None else np.array(theta_hat, dtype=float),
        W_bar=W, nu=nu, chi=chi,
        margins=verify_sample(A, B, cfg.R, W, nu, chi, cfg.alpha),
        objective=cfg.d_bar * chi / cfg.alpha,
    )


def sample_ncm_metric(sys: SystemModel, cfg: SynthesisConfig, x, x_d, u_d=None) -> MetricSample:
    """Optimal scaled metric at one (x, x_d) for a known system."""
    return _sample(sys, cfg, x, x_d, u_d, None)


def sample_ancm_metric(psys: ParametricSystem, cfg: SynthesisConfig, x, x_d, theta_hat,
                       u_d=None) -> MetricSample:
    """Optimal scaled metric at (x, x_d) for the system frozen at theta_hat."""
    return _sample(psys.model(theta_hat), cfg, x, x_d, u_d, theta_hat)


def _split(point, n, has_theta):
    x, x_d = point[:n], point[n:2 * n]
    th = point[2 * n:] if has_theta else None
    return x, x_d, th


def build_dataset(psys, cfg: SynthesisConfig, u_d=None):
    """One sample per grid point; infeasible points are recorded and skipped.

    ``psys`` may be a SystemModel or a ParametricSystem (grid then includes
    theta_hat).  Returns (samples, summary).
    """
    if cfg.grid is None:
        raise ValueError("synthesis config has no grid")
    has_theta = isinstance(psys, ParametricSystem)
    n = psys.n
    points = cfg.grid.points()
    model_at = (lambda th: psys.model(th)) if has_theta else (lambda th: psys)
    samples, bad = [], []
    if cfg.mode == "uniform":
        blocks = []
        for pt in points:
            x, x_d, th = _split(pt, n, has_theta)
            m = model_at(th)
            blocks.append((sdc_matrix(m, x, x_d, u_d), m.B(x)))
        try:
            W, nu, chi = _solve_metric(blocks, n, cfg)
        except Infeasible:
            raise EmptyDataset("uniform metric program infeasible over the whole grid")
        for pt, (A, B) in zip(points, blocks):
            x, x_d, th = _split(pt, n, has_theta)
            samples.append(MetricSample(x.copy(), x_d.copy(), None if th is None else th.copy(),
                                        W, nu, chi, verify_sample(A, B, cfg.R, W, nu, chi, cfg.alpha),
                                        cfg.d_bar * chi / cfg.alpha))
    else:
        for pt in points:
            x, x_d, th = _split(pt, n, has_theta)
            try:
                samples.append(_sample(model_at(th), cfg, x, x_d, u_d, th))
            except Infeasible:
                bad.append(pt)
    if not samples:
        raise EmptyDataset("every grid point was infeasible")
    return samples, summarize(samples, len(points), bad)


def summarize(samples: Sequence[MetricSample], total: int | None = None, bad=()) -> DatasetSummary:
    nus = np.array([s.nu for s in samples])
    chis = np.array([s.chi for s in samples])
    return DatasetSummary(
        total=len(samples) if total is None else total,
        feasible=len(samples),
        infeasible_points=list(bad),
        chi=float(chis.max()),
        omega_lower=float(1.0 / nus.max()),
        omega_upper=float(np.max(chis / nus)),
    )


class ExactMetric:
    """Metric evaluated by solving the sampling program at the queried point.

    ``shared`` fixes a precomputed (W, nu) instead, i.e. a constant metric.
    """

    def __init__(self, psys, cfg: SynthesisConfig, shared: MetricSample | None = None, u_d=None):
        self.psys = psys
        self.cfg = cfg
        self.shared = shared
        self.u_d = u_d

    def __call__(self, x, x_d, theta_hat=None) -> Array:
        if self.shared is not None:
            return self.shared.M
        if isinstance(self.psys, ParametricSystem):
            s = sample_ancm_metric(self.psys, self.cfg, x, x_d, theta_hat, self.u_d)
        else:
            s = sample_ncm_metric(self.psys, self.cfg, x, x_d, self.u_d)
        return s.M


def constant_metric(sample: MetricSample):
    M = sample.M

    def metric(x, x_d, theta_hat=None):
        return M
    return metric


# ---------------------------------------------------------------------------
# CSV persistence


def dataset_header(n: int, p: int) -> list:
    cols = [f"x{i}" for i in range(n)] + [f"xd{i}" for i in range(n)]
    cols += [f"th{i}" for i in range(p)]
    cols += [f"W{i}{j}" for i in range(n) for j in range(i, n)]
    return cols + ["nu", "chi", "margin"]


def write_dataset(path, samples: Sequence[MetricSample]) -> None:
    n = samples[0].x.size
    p = 0 if samples[0].theta_hat is None else samples[0].theta_hat.size
    iu = np.triu_indices(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(n, p))
        for s in samples:
            th = [] if s.theta_hat is None else list(s.theta_hat)
            row = list(s.x) + list(s.x_d) + th + list(s.W_bar[iu]) + [s.nu, s.chi, max(s.margins.values())]
            w.writerow([f"{v:.17g}" for v in row])


def read_dataset(path, n: int) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    p = sum(1 for h in header if h.startswith("th"))
    iu = np.triu_indices(n)
    out = []
    for r in body:
        v = np.array([float(a) for a in r])
        x, x_d = v[:n], v[n:2 * n]
        th = v[2 * n:2 * n + p] if p else None
        k = 2 * n + p
        W = np.zeros((n, n))
        W[iu] = v[k:k + len(iu[0])]
        W = W + np.triu(W, 1).T
        k += len(iu[0])
        nu, chi, margin = v[k:k + 3]
        out.append(MetricSample(x, x_d, th, W, nu, chi, {"recorded": margin}, np.nan))
    return out
