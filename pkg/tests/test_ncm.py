import numpy as np
import pytest
from hypothesis import given, strategies as st

from ancm.errors import DivergedLoss, EmptyDataset
from ancm.lmi import min_eig
from ancm.ncm import (EPS_PD, ConstraintData, MetricNet, TableMetric, TrainConfig, alpha_ncm,
                      estimate_learning_error, forward_metric, grad_check, load_checkpoint, make_validation,
                      metric_derivatives, save_checkpoint, train)
from ancm.synthesis import MetricSample


def sample(x, W, nu=2.0, chi=3.0, th=None):
    x = np.asarray(x, dtype=float)
    return MetricSample(x, np.zeros_like(x), th, np.asarray(W, dtype=float), nu, chi, {}, 0.0)


def small_dataset(k=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for x in rng.uniform(-1, 1, (k, 2)):
        W = np.array([[1.5 + 0.3 * x[0], 0.2 * x[1]], [0.2 * x[1], 2.0 - 0.2 * x[0] ** 2]])
        out.append(sample(x, W))
    return out


def test_zero_net_is_floor():
    net = MetricNet(3, hidden=(8, 8))
    net.zero()
    assert np.allclose(forward_metric(net, np.ones(3), np.zeros(3)), EPS_PD * np.eye(3))


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.integers(0, 5))
def test_output_symmetric_pd(v, seed):
    net = MetricNet(3, hidden=(16, 16), seed=seed)
    M = net(np.array(v[:3]), np.array(v[3:]))
    assert np.array_equal(M, M.T)
    assert min_eig(M) >= EPS_PD * (1 - 1e-9)


def test_output_symmetric_batch():
    net = MetricNet(4, 2, hidden=(20, 20), seed=3)
    X = np.random.default_rng(0).uniform(-3, 3, (1000, 10))
    Ms = net.metric_from_raw(X)
    assert np.max(np.abs(Ms - Ms.transpose(0, 2, 1))) <= 1e-12


def test_overfit_single_sample():
    s = sample([0.3, -0.2], [[2.0, 0.3], [0.3, 1.2]])
    net, losses = train(MetricNet(2, hidden=(10, 10)), [s], TrainConfig(epochs=300, lr=1e-2, batch_size=1))
    assert losses[-1] < 1e-8
    assert np.max(np.abs(net(s.x, s.x_d) - s.M)) <= 1e-4


def test_training_reduces_loss_and_is_deterministic():
    data = small_dataset()
    cfg = TrainConfig(epochs=40, lr=5e-3, seed=2)
    a, la = train(MetricNet(2, hidden=(16, 16), seed=1), data, cfg)
    b, lb = train(MetricNet(2, hidden=(16, 16), seed=1), data, cfg)
    assert la[-1] < la[0]
    assert np.array_equal(a.mlp.flat(), b.mlp.flat())
    assert np.array_equal(la, lb)


def test_train_errors():
    with pytest.raises(EmptyDataset):
        train(MetricNet(2, hidden=(4,)), [], TrainConfig(epochs=1))
    with pytest.raises(DivergedLoss), np.errstate(over="ignore", invalid="ignore"):
        train(MetricNet(2, hidden=(16,)), small_dataset(), TrainConfig(epochs=50, lr=1e6, run_grad_check=False))
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="other")


def test_constraint_loss_decreases():
    data = small_dataset(20)
    A = np.array([[[0.0, 1.0], [1.0, -0.5]]] * 20)
    P = np.array([[[0.0, 0.0], [0.0, 1.0]]] * 20)
    cdata = ConstraintData(A, P, alpha=0.5, omega_lower=0.1, omega_upper=10.0)
    cfg = TrainConfig(epochs=30, lr=1e-3, loss_mode="constraint", run_grad_check=False)
    net, losses = train(MetricNet(2, hidden=(12,), seed=4), data, cfg, constraint_data=cdata)
    assert losses[-1] < losses[0]
    assert grad_check(net, data[:4], cfg=cfg, constraint_data=cdata) <= 1e-5


def test_grad_check_examples():
    data = small_dataset(6)
    lin = MetricNet(2, hidden=(5,), activation="linear", seed=0)
    # the factor head makes the loss quartic in the weights, so only truncation error remains
    assert grad_check(lin, data, step=1e-5) <= 1e-8
    deep = MetricNet(2, hidden=(100, 100, 100), seed=0)
    assert grad_check(deep, data, step=1e-6) <= 1e-5
    assert grad_check(deep, data, corrupt=lambda g: g * 1.1 + 1e-3) >= 1e-2


def test_metric_derivative_examples():
    net = MetricNet(2, hidden=(6,), seed=0)
    x, xd = np.array([0.4, -0.1]), np.array([0.1, 0.3])
    dx, dxd = metric_derivatives(net, x, x, None, np.zeros(2))
    assert np.allclose(dx, 0) and np.allclose(dxd, 0)
    const = lambda a, b, th=None: np.diag([2.0, 3.0])
    dx, dxd = metric_derivatives(const, x, xd, None, x - xd)
    assert np.allclose(dx, 0) and np.allclose(dxd, 0)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_metric_derivative_analytic(x1, x2, e1, e2):
    metric = lambda x, xd, th=None: np.diag([1.0 + x[0] ** 2, 1.0])
    e = np.array([e1, e2])
    dx, dxd = metric_derivatives(metric, np.array([x1, x2]), np.zeros(2), None, e)
    expected = np.zeros((2, 2))
    expected[0] = [x1 * e1, 0.0]
    assert np.allclose(dx, expected, atol=1e-6)
    assert np.allclose(dxd, 0.0)


def test_network_derivatives_match_callable_path():
    net = MetricNet(2, 1, hidden=(10, 10), seed=5)
    x, xd, th = np.array([0.3, -0.4]), np.array([0.1, 0.2]), np.array([0.7])
    a = metric_derivatives(net, x, xd, th, x - xd)
    b = metric_derivatives(lambda p, q, t: net(p, q, t), x, xd, th, x - xd)
    assert np.allclose(a[0], b[0], atol=1e-9) and np.allclose(a[1], b[1], atol=1e-9)


def test_learning_error_exact_table():
    rng = np.random.default_rng(0)
    net = MetricNet(2, hidden=(8,), seed=0)
    pts = [np.concatenate([rng.uniform(-1, 1, 2), np.zeros(2)]) for _ in range(5)]
    val = make_validation(lambda x, xd, th=None: net(x, xd) + np.eye(2), pts, 2)
    table = TableMetric(val)
    rep = estimate_learning_error(table, val, alpha=0.8, rho_bar=1.0, b_bar=1.0, chi=4.0)
    assert rep.eps_ell == 0.0 and rep.alpha_ncm == 0.8 and rep.passed


def test_learning_error_boundary():
    alpha, rho, b, chi = 1.0, 2.0, 1.5, 9.0
    eps = alpha / (rho * b * b * np.sqrt(chi))
    assert abs(alpha_ncm(alpha, rho, b, eps, chi)) < 1e-15
    # a network offset by exactly eps from the reference
    M0 = np.diag([2.0, 3.0])
    val = make_validation(lambda x, xd, th=None: M0, [np.zeros(4)], 2)
    shifted = lambda x, xd, th=None: M0 + eps * np.eye(2)
    rep = estimate_learning_error(shifted, val, alpha, rho, b, chi, include_derivatives=False)
    assert abs(rep.eps_ell - eps) < 1e-15
    assert not rep.passed


def test_checkpoint_roundtrip(tmp_path):
    net, _ = train(MetricNet(2, 1, hidden=(7, 5), seed=9), [sample([0.1, 0.2], np.eye(2) * 2, th=np.array([0.5]))],
                   TrainConfig(epochs=3))
    path = tmp_path / "net.txt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.mlp.flat(), net.mlp.flat())
    assert back.out_scale == net.out_scale and np.array_equal(back.in_mean, net.in_mean)
    x = np.array([0.3, 0.1])
    assert np.array_equal(back(x, x, [0.2]), net(x, x, [0.2]))
    assert path.read_text().startswith("# metric-net checkpoint v1")
