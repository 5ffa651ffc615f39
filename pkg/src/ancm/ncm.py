"""Neural metric model: a network mapping (x, x_d, theta_hat) to a PD matrix.

The network output is the lower-triangular factor L, and the metric is
``scale * L L^T + eps_pd I``, so positive definiteness holds for every input.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergedLoss, GradientCheckFailed
from .mlp import MLP

Array = np.ndarray

EPS_PD = 1e-4


class MetricNet:
    """Metric network with input normalization and a Cholesky output head."""

    def __init__(self, n: int, p: int = 0, hidden=(100, 100, 100), seed: int = 0,
                 eps_pd: float = EPS_PD, activation: str = "tanh"):
        self.n = n
        self.p = p
        self.seed = seed
        self.eps_pd = eps_pd
        self.hidden = tuple(hidden)
        self.mlp = MLP((2 * n + p, *self.hidden, n * (n + 1) // 2), seed=seed, activation=activation)
        self.in_mean = np.zeros(2 * n + p)
        self.in_scale = np.ones(2 * n + p)
        self.out_scale = 1.0
        self._tril = np.tril_indices(n)

    def copy(self) -> "MetricNet":
        return copy.deepcopy(self)

    def zero(self) -> None:
        self.mlp.set_flat(np.zeros(self.mlp.n_params))

    def features(self, x, x_d, theta_hat=None) -> Array:
        parts = [np.atleast_1d(x), np.atleast_1d(x_d)]
        if self.p:
            parts.append(np.atleast_1d(theta_hat))
        return np.concatenate(parts).astype(float)

    def _normalize(self, X):
        return (np.atleast_2d(X) - self.in_mean) / self.in_scale

    def factor(self, out) -> Array:
        L = np.zeros((out.shape[0], self.n, self.n))
        L[:, self._tril[0], self._tril[1]] = out
        return L

    def metric_from_raw(self, X) -> Array:
        """Metrics for a batch of un-normalized stacked inputs, shape (B, n, n)."""
        out, _ = self.mlp.forward(self._normalize(X))
        L = self.factor(out)
        return self.out_scale * L @ L.transpose(0, 2, 1) + self.eps_pd * np.eye(self.n)

    def __call__(self, x, x_d, theta_hat=None) -> Array:
        return self.metric_from_raw(self.features(x, x_d, theta_hat))[0]

    def fit_normalization(self, X, targets) -> None:
        """Input standardization and output scale from a dataset; output bias set to the mean factor."""
        X = np.atleast_2d(X)
        self.in_mean = X.mean(axis=0)
        spread = X.std(axis=0)
        self.in_scale = np.where(spread > 1e-12, spread, 1.0)
        T = np.asarray(targets)
        self.out_scale = float(np.max(np.abs(T)))
        mean_T = T.mean(axis=0) / self.out_scale
        w = np.linalg.eigvalsh(mean_T).min()
        shift = max(self.eps_pd / self.out_scale - w, 0.0) + 1e-12
        L0 = np.linalg.cholesky(mean_T - (self.eps_pd / self.out_scale) * np.eye(self.n) + shift * np.eye(self.n))
        self.mlp.biases[-1][:] = L0[self._tril]


def forward_metric(net: MetricNet, x, x_d, theta_hat=None) -> Array:
    return net(x, x_d, theta_hat)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-2
    lr_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0
    loss_mode: str = "regression"
    grad_check_tol: float = 1e-5
    run_grad_check: bool = True

    def __post_init__(self):
        if self.loss_mode not in ("regression", "constraint"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")

    def rate(self, epoch: int) -> float:
        return self.lr / (1.0 + self.lr_decay * epoch)


@dataclass
class ConstraintData:
    """Per-sample data for the constraint-penalty loss.

    Penalized: lambda_max(2 sym(M A) - 2 M P M + 2 alpha M) with P = B R^-1 B^T,
    lambda_max(I/omega_upper - M) and lambda_max(M - I/omega_lower).
    """

    A: Array  # (N, n, n)
    P: Array  # (N, n, n)
    alpha: float
    omega_lower: float
    omega_upper: float


def _regression_loss(net, X, T, need_grad=True):
    out, cache = net.mlp.forward(net._normalize(X))
    L = net.factor(out)
    s = net.out_scale
    Mb = s * L @ L.transpose(0, 2, 1) + net.eps_pd * np.eye(net.n)
    G = (Mb - T) / s
    B = X.shape[0]
    loss = float(np.sum(G * G) / B)
    if not need_grad:
        return loss, None
    dL = 4.0 * G @ L / B
    dout = dL[:, net._tril[0], net._tril[1]]
    return loss, net.mlp.backward(cache, dout)


def _constraint_loss(net, X, data: ConstraintData, idx, need_grad=True):
    out, cache = net.mlp.forward(net._normalize(X))
    L = net.factor(out)
    s = net.out_scale
    n = net.n
    I = np.eye(n)
    Mb = s * L @ L.transpose(0, 2, 1) + net.eps_pd * I
    B = X.shape[0]
    loss = 0.0
    gM = np.zeros_like(Mb)
    for b, j in enumerate(idx):
        M, A, P = Mb[b], data.A[j], data.P[j]
        MA = M @ A
        C = MA + MA.T - 2.0 * M @ P @ M + 2.0 * data.alpha * M
        terms = [(C, "c"), (I / data.omega_upper - M, "lo"), (M - I / data.omega_lower, "hi")]
        for mat, kind in terms:
            w, V = np.linalg.eigh(mat)
            if w[-1] <= 0:
                continue
            loss += w[-1] / s
            v = V[:, -1]
            if kind == "c":
                Av, w2 = A @ v, P @ M @ v
                g = np.outer(v, Av) + np.outer(Av, v) - 2.0 * (np.outer(v, w2) + np.outer(w2, v)) \
                    + 2.0 * data.alpha * np.outer(v, v)
            elif kind == "lo":
                g = -np.outer(v, v)
            else:
                g = np.outer(v, v)
            gM[b] += g / s
    loss /= B
    if not need_grad:
        return loss, None
    dL = s * (gM + gM.transpose(0, 2, 1)) @ L / B
    dout = dL[:, net._tril[0], net._tril[1]]
    return loss, net.mlp.backward(cache, dout)


def _dataset_arrays(net, dataset):
    X = np.array([net.features(s.x, s.x_d, s.theta_hat) for s in dataset])
    T = np.array([s.M for s in dataset])
    return X, T


def _loss_fn(net, cfg, X, T, cdata):
    if cfg.loss_mode == "regression":
        return lambda idx, g=True: _regression_loss(net, X[idx], T[idx], g)
    if cdata is None:
        raise ValueError("constraint loss needs ConstraintData")
    return lambda idx, g=True: _constraint_loss(net, X[idx], cdata, idx, g)


def train(net: MetricNet, dataset: Sequence, cfg: TrainConfig, constraint_data: ConstraintData | None = None,
          normalize: bool = True):
    """SGD with momentum on a copy of ``net``; returns (trained net, per-epoch training loss)."""
    from .errors import EmptyDataset

    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    net = net.copy()
    X, T = _dataset_arrays(net, dataset)
    if normalize:
        net.fit_normalization(X, T)
    loss_fn = _loss_fn(net, cfg, X, T, constraint_data)
    if cfg.run_grad_check:
        err = grad_check(net, dataset[:min(8, len(dataset))], cfg=cfg, constraint_data=constraint_data)
        if err > cfg.grad_check_tol:
            raise GradientCheckFailed(f"backprop/finite-difference mismatch {err:.3e}")
    rng = np.random.default_rng(cfg.seed)
    vel = np.zeros(net.mlp.n_params)
    N = len(dataset)
    all_idx = np.arange(N)
    losses = [loss_fn(all_idx, False)[0]]
    for epoch in range(cfg.epochs):
        lr = cfg.rate(epoch)
        perm = rng.permutation(N)
        for k in range(0, N, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            loss, grads = loss_fn(idx)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            vel = cfg.momentum * vel - lr * MLP.flatten_grads(grads)
            net.mlp.set_flat(net.mlp.flat() + vel)
        full = loss_fn(all_idx, False)[0]
        if not np.isfinite(full):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        losses.append(full)
    return net, np.array(losses)


def grad_check(net: MetricNet, samples: Sequence, cfg: TrainConfig | None = None, n_weights: int = 40,
               step: float = 1e-6, seed: int = 0, constraint_data: ConstraintData | None = None,
               corrupt: Callable[[Array], Array] | None = None) -> float:
    """Max relative error between backprop and central-difference gradients on random weights.

    Each component is compared relative to the larger of the two values,
    floored at 1e-4 of the largest checked gradient entry (and at 1e-6
    absolute) so that entries near zero, e.g. at an exact fit, do not turn
    finite-difference noise into a failure.  ``corrupt`` lets tests
    perturb the backprop gradient to confirm the check detects errors.
    """
    cfg = cfg or TrainConfig(run_grad_check=False)
    X, T = _dataset_arrays(net, samples)
    work = net.copy()
    loss_fn = _loss_fn(work, cfg, X, T, constraint_data)
    idx = np.arange(len(samples))
    _, grads = loss_fn(idx)
    g = MLP.flatten_grads(grads)
    if corrupt is not None:
        g = corrupt(g)
    w0 = work.mlp.flat()
    rng = np.random.default_rng(seed)
    picks = rng.choice(w0.size, size=min(n_weights, w0.size), replace=False)
    worst = 0.0
    fds = []
    for i in picks:
        w = w0.copy()
        w[i] += step
        work.mlp.set_flat(w)
        lp = loss_fn(idx, False)[0]
        w[i] -= 2 * step
        work.mlp.set_flat(w)
        lm = loss_fn(idx, False)[0]
        fds.append((lp - lm) / (2 * step))
    work.mlp.set_flat(w0)
    fds = np.array(fds)
    floor = max(1e-4 * max(np.max(np.abs(fds)), np.max(np.abs(g[picks]))), 1e-6)
    for fd, gi in zip(fds, g[picks]):
        worst = max(worst, abs(fd - gi) / max(abs(fd), abs(gi), floor))
    return float(worst)


# ---------------------------------------------------------------------------
# Derivatives and learning error


def metric_derivatives(metric, x, x_d, theta_hat, e, step: float = 1e-5):
    """(dM_x, dM_xd): row i is ((dM/dq_i) e)^T / 2, derivatives by central differences.

    ``metric`` is any callable (x, x_d, theta_hat) -> matrix; networks are
    evaluated in one batch.  Metrics with a ``derivatives`` method supply
    their own values.
    """
    if hasattr(metric, "derivatives"):
        return metric.derivatives(x, x_d, theta_hat, e)
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    e = np.asarray(e, dtype=float)
    n = x.size
    if isinstance(metric, MetricNet):
        base = metric.features(x, x_d, theta_hat)
        X = np.repeat(base[None, :], 4 * n, axis=0)
        for i in range(n):
            X[2 * i, i] += step
            X[2 * i + 1, i] -= step
            X[2 * n + 2 * i, n + i] += step
            X[2 * n + 2 * i + 1, n + i] -= step
        Ms = metric.metric_from_raw(X)
        dx = (Ms[0:2 * n:2] - Ms[1:2 * n:2]) / (2 * step)
        dxd = (Ms[2 * n::2] - Ms[2 * n + 1::2]) / (2 * step)
    else:
        dx = np.empty((n, n, n))
        dxd = np.empty((n, n, n))
        for i in range(n):
            h = np.zeros(n)
            h[i] = step
            dx[i] = (metric(x + h, x_d, theta_hat) - metric(x - h, x_d, theta_hat)) / (2 * step)
            dxd[i] = (metric(x, x_d + h, theta_hat) - metric(x, x_d - h, theta_hat)) / (2 * step)
    return 0.5 * (dx @ e), 0.5 * (dxd @ e)


@dataclass
class ValidationPoint:
    x: Array
    x_d: Array
    theta_hat: Array | None
    M: Array
    dM_x: Array
    dM_xd: Array


def make_validation(reference, points: Sequence, n: int, step: float = 1e-5) -> list:
    """Reference metric and derivatives (with e = x - x_d) at stacked (x, x_d, theta_hat) points."""
    out = []
    for pt in points:
        pt = np.asarray(pt, dtype=float)
        x, x_d = pt[:n], pt[n:2 * n]
        th = pt[2 * n:] if pt.size > 2 * n else None
        dx, dxd = metric_derivatives(reference, x, x_d, th, x - x_d, step)
        out.append(ValidationPoint(x, x_d, th, reference(x, x_d, th), dx, dxd))
    return out


@dataclass
class LearningErrorReport:
    eps_M: float
    eps_dM: float
    eps_ell: float
    alpha_ncm: float
    passed: bool
    details: dict = field(default_factory=dict)


def alpha_ncm(alpha: float, rho_bar: float, b_bar: float, eps_ell: float, chi: float) -> float:
    return alpha - rho_bar * b_bar**2 * eps_ell * np.sqrt(chi)


def estimate_learning_error(net, validation: Sequence[ValidationPoint], alpha: float, rho_bar: float,
                            b_bar: float, chi: float, include_derivatives: bool = True) -> LearningErrorReport:
    """Sup-norm metric and derivative errors over held-out points, and the resulting rate."""
    if not validation:
        raise ValueError("validation set is empty")
    eps_M = eps_dM = 0.0
    for v in validation:
        eps_M = max(eps_M, float(np.linalg.norm(net(v.x, v.x_d, v.theta_hat) - v.M, 2)))
        if include_derivatives:
            dx, dxd = metric_derivatives(net, v.x, v.x_d, v.theta_hat, v.x - v.x_d)
            eps_dM = max(eps_dM, float(np.linalg.norm(dx - v.dM_x, 2)), float(np.linalg.norm(dxd - v.dM_xd, 2)))
    eps = max(eps_M, eps_dM)
    a = alpha_ncm(alpha, rho_bar, b_bar, eps, chi)
    # conservative at the boundary: roundoff must not turn alpha_NCM = 0 into a pass
    return LearningErrorReport(eps_M, eps_dM, eps, a, bool(a > 1e-12 * alpha),
                               {"count": len(validation), "alpha": alpha, "chi": chi})


class TableMetric:
    """Metric that returns stored values at stored points (nearest stored point otherwise).

    Derivatives are the stored ones, which belong to the stored error
    vector e = x - x_d of each point.
    """

    def __init__(self, validation: Sequence[ValidationPoint]):
        self.points = np.array([np.concatenate([v.x, v.x_d] + ([] if v.theta_hat is None else [v.theta_hat]))
                                for v in validation])
        self.entries = list(validation)

    def _nearest(self, x, x_d, theta_hat) -> ValidationPoint:
        q = np.concatenate([np.atleast_1d(x), np.atleast_1d(x_d)] +
                           ([] if theta_hat is None else [np.atleast_1d(theta_hat)]))
        return self.entries[int(np.argmin(np.linalg.norm(self.points - q, axis=1)))]

    def __call__(self, x, x_d, theta_hat=None):
        return self._nearest(x, x_d, theta_hat).M

    def derivatives(self, x, x_d, theta_hat, e):
        v = self._nearest(x, x_d, theta_hat)
        return v.dM_x, v.dM_xd


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net: MetricNet, path) -> None:
    with open(path, "w") as fh:
        fh.write("# metric-net checkpoint v1\n")
        fh.write(f"n {net.n}\np {net.p}\nhidden {' '.join(map(str, net.hidden))}\n")
        fh.write(f"activation {net.mlp.activation}\nseed {net.seed}\neps_pd {net.eps_pd:.17g}\n")
        fh.write(f"out_scale {net.out_scale:.17g}\n")
        fh.write("in_mean " + " ".join(f"{v:.17g}" for v in net.in_mean) + "\n")
        fh.write("in_scale " + " ".join(f"{v:.17g}" for v in net.in_scale) + "\n")
        for k, (W, b) in enumerate(zip(net.mlp.weights, net.mlp.biases)):
            fh.write(f"layer {k} {W.shape[0]} {W.shape[1]}\n")
            for row in W:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in b) + "\n")


def load_checkpoint(path) -> MetricNet:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    head = {}
    i = 0
    while not lines[i].startswith("layer"):
        key, _, rest = lines[i].partition(" ")
        head[key] = rest
        i += 1
    net = MetricNet(int(head["n"]), int(head["p"]), tuple(int(h) for h in head["hidden"].split()),
                    seed=int(head["seed"]), eps_pd=float(head["eps_pd"]), activation=head["activation"])
    net.out_scale = float(head["out_scale"])
    net.in_mean = np.array([float(v) for v in head["in_mean"].split()])
    net.in_scale = np.array([float(v) for v in head["in_scale"].split()])
    for k in range(len(net.mlp.weights)):
        _, _, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        W = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)])
        b = np.array([float(v) for v in lines[i + 1 + rows].split()])
        net.mlp.weights[k][...] = W
        net.mlp.biases[k][...] = b
        i += rows + 2
    return net
