import numpy as np
import pytest
from hypothesis import given, strategies as st

from ancm.controllers import (AdaptiveState, ControllerConfig, GainCertificate, affine_adaptive_step,
                              ancm_control_step, basis_weight_step, bregman_adaptation_wrap, check_gain_condition,
                              clf_qp_gain, closed_form_alpha_a, gain_matrices, l2_potential_hessian,
                              lagrangian_adaptive_step, lyapunov_value, quadratic_potential_hessian,
                              robust_ncm_u, smoothed_l1_hessian, tracking_error_bound)
from ancm.dynamics import (AffineUncertainSystem, BasisFunctionModel, LagrangianSystem, ParametricSystem,
                           SystemModel, cartpole_model, cartpole_parametric)
from ancm.errors import SingularHessian
from ancm.lmi import max_eig
from ancm.sim import Disturbance, integrate_rk4

unit_metric = lambda x, xd, th=None: np.eye(np.size(x))


def scalar_system(a=1.0):
    return SystemModel(1, 1, f=lambda x: a * x, B=lambda x: np.array([[1.0]]))


def gain_cfg(sigma=0.5, gamma=2.0, **kw):
    bounds = dict(omega_lower=0.2, omega_upper=5.0, y_bar=1.5, phi_bar=1.0, b_bar=2.0, delta_bar=0.7,
                  zeta_bar=1.2, theta_bar=3.0, d_bar=0.1, m=1)
    bounds.update(kw)
    return ControllerConfig(R=np.eye(1), Gamma=gamma, sigma=sigma, alpha=1.0, bounds=bounds)


# ---------------------------------------------------------------------------
# robust law


def test_robust_u_examples():
    sys = scalar_system()
    assert np.allclose(robust_ncm_u(unit_metric, sys, [0.4], [0.4], [1.5], np.eye(1)), [1.5])
    assert np.allclose(robust_ncm_u(unit_metric, sys, [0.9], [0.4], [1.5], np.eye(1)), [1.0])


def test_robust_u_opposes_pole_rate(cp):
    sys = cartpole_model(cp)
    M = np.diag([1.0, 30.0, 1.0, 5.0])
    metric = lambda x, xd, th=None: M
    for w in (0.5, -0.5):
        x = np.array([0.0, 0.0, 0.0, w])
        u = robust_ncm_u(metric, sys, x, np.zeros(4), [0.0], np.eye(1))
        # the input's contribution to the pole acceleration opposes the pole rate
        assert np.sign(sys.B(x)[3, 0] * u[0]) == -np.sign(w)
    u0 = robust_ncm_u(metric, sys, np.array([0.83, -0.32, 0.39, 0.45]), np.zeros(4), [0.0], np.eye(1))
    assert np.all(np.isfinite(u0))


# ---------------------------------------------------------------------------
# affine law


def linear_uncertain():
    base = scalar_system(-1.0)
    return AffineUncertainSystem(base, Delta=lambda x: -np.atleast_2d(x))  # -Delta^T theta = x theta


def test_affine_zero_error():
    sys = linear_uncertain()
    cfg = ControllerConfig(Gamma=1.0, sigma=0.0)
    u, dth = affine_adaptive_step(unit_metric, sys, [0.5], [0.5], [0.3], AdaptiveState(np.array([2.0])), cfg)
    assert np.allclose(dth, 0.0) and np.allclose(u, [0.3])
    cfg = ControllerConfig(Gamma=3.0, sigma=0.4)
    _, dth = affine_adaptive_step(unit_metric, sys, [0.5], [0.5], [0.3], AdaptiveState(np.array([2.0])), cfg)
    assert np.allclose(dth, -3.0 * 0.4 * 2.0)


def test_affine_closed_loop_lyapunov_oracle():
    # e' = -2 e - e th_tilde, th_tilde' = Gamma e^2  =>  V = e^2 + th_tilde^2 / Gamma has V' = -4 e^2
    sys = linear_uncertain()
    cfg = ControllerConfig(Gamma=1.0, sigma=0.0)
    theta = 0.8

    def deriv(t, z):
        x, th = z[:1], z[1:]
        u, dth = affine_adaptive_step(unit_metric, sys, x, [0.0], [0.0], AdaptiveState(th), cfg)
        return np.concatenate([sys.rhs(x, u, [theta]), dth])

    log = integrate_rk4(deriv, [1.0, -0.5], 1e-3, 6.0)
    e, tt = log.x[:, 0], log.x[:, 1] - theta
    V = e**2 + tt**2
    dV = np.gradient(V, log.t)
    assert np.max(np.abs(dV[1:-1] + 4 * e[1:-1] ** 2)) < 1e-5
    assert abs(e[-1]) < 1e-3


# ---------------------------------------------------------------------------
# Lagrangian law


def test_lagrangian_examples():
    lsys = LagrangianSystem(H=lambda s: np.eye(2), h=lambda s: np.zeros(2), Delta=lambda s: np.diag([1.0, 2.0]))
    cfg = ControllerConfig(R=np.eye(2), Gamma=1.0, sigma=0.3)
    tau, dth = lagrangian_adaptive_step(unit_metric, lsys, np.zeros(2), AdaptiveState(np.array([1.0, 1.0])), cfg)
    assert np.allclose(tau, [1.0, 2.0]) and np.allclose(dth, 0.0)
    free = LagrangianSystem(H=lambda s: np.eye(2), h=lambda s: np.zeros(2), Delta=lambda s: np.zeros((2, 2)))
    s = np.array([0.3, -0.4])
    tau, _ = lagrangian_adaptive_step(unit_metric, free, s, AdaptiveState(np.zeros(2)), cfg)
    assert np.allclose(tau, robust_ncm_u(unit_metric, free.as_system(2), s, np.zeros(2), np.zeros(2), np.eye(2)))


def test_lagrangian_leakage_switch():
    lsys = LagrangianSystem(H=lambda s: np.eye(1), h=lambda s: np.zeros(1), Delta=lambda s: np.zeros((1, 2)))
    cfg = ControllerConfig(Gamma=1.0, sigma=0.5)
    with pytest.raises(ValueError):
        lagrangian_adaptive_step(unit_metric, lsys, np.ones(1), AdaptiveState(np.ones(2)), cfg)
    cfg = ControllerConfig(Gamma=1.0, sigma=0.5, leakage_on_state=False)
    _, dth = lagrangian_adaptive_step(unit_metric, lsys, np.ones(1), AdaptiveState(np.ones(2)), cfg)
    assert np.allclose(dth, -0.5)


def test_lagrangian_arm_within_bound():
    # H = 1, h = s, Delta = s: s' = -2 s + s th_tilde + d  (contraction rate 2 with M = 1)
    theta, d_s = 0.6, 0.2
    lsys = LagrangianSystem(H=lambda s: np.eye(1), h=lambda s: s, Delta=lambda s: np.atleast_2d(s))
    bounds = dict(omega_lower=1.0, omega_upper=1.0, delta_bar=2.0, b_bar=1.0, theta_bar=theta, d_bar_s=d_s)
    cfg = ControllerConfig(R=np.eye(1), Gamma=1.0, sigma=0.5, alpha=2.0, bounds=bounds, leakage_on_state=False)
    cert = check_gain_condition("lagrangian", cfg, 0.0, 2.0)
    assert cert.passed and abs(cert.alpha_a - 0.5) < 1e-9
    dist = Disturbance(1, d_s, seed=3)

    def deriv(t, z):
        s, th = z[:1], z[1:]
        tau, dth = lagrangian_adaptive_step(unit_metric, lsys, s, AdaptiveState(th), cfg)
        return np.concatenate([lsys.sdot(s, tau, [theta], dist(t)), dth])

    z0 = np.array([1.5, 0.0])
    log = integrate_rk4(deriv, z0, 1e-2, 20.0)
    V0 = lyapunov_value(np.eye(1), z0[:1], z0[1:] - theta, np.eye(1))
    bound = tracking_error_bound(cert, V0, log.t, cfg)
    assert np.all(np.abs(log.x[:, 0]) <= 1.05 * bound)


# ---------------------------------------------------------------------------
# aNCM law


def test_ancm_zero_error(cp):
    psys = cartpole_parametric(cp)
    cfg = ControllerConfig(Gamma=np.eye(2), sigma=0.0)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    M = np.diag([1.0, 2.0, 3.0, 4.0])
    u, dth = ancm_control_step(lambda a, b, c: M, psys, x, x, [0.7], [0.0], AdaptiveState(np.array([1.0, 0.01])), cfg)
    assert np.allclose(u, [0.7]) and np.allclose(dth, 0.0)


def test_ancm_reduces_to_robust_without_parameters():
    sys = SystemModel(2, 1, f=lambda x: np.array([x[1], np.sin(x[0])]), B=lambda x: np.array([[0.0], [1.0]]))
    psys = ParametricSystem(2, 1, 0, 0, sys.f, sys.B, Y_f=lambda x: np.zeros((2, 0)), Z=lambda th: np.zeros(0))
    M = np.array([[2.0, 0.3], [0.3, 1.0]])
    metric = lambda a, b, c=None: M
    x, xd = np.array([0.3, -0.2]), np.array([0.1, 0.1])
    u, dth = ancm_control_step(metric, psys, x, xd, [0.2], [0.0], AdaptiveState(np.zeros(0)),
                               ControllerConfig(Gamma=1.0))
    assert np.array_equal(u, robust_ncm_u(metric, sys, x, xd, [0.2], np.eye(1)))
    assert dth.size == 0


def test_ancm_true_parameter_lyapunov_decrease(cp):
    from ancm.scenarios import uniform_metric
    from ancm.sim import AncmAdaptive, SimConfig, simulate
    from ancm.dynamics import eval_cartpole

    psys = cartpole_parametric(cp)
    theta = np.array([cp.mu_c, cp.mu_p])
    alpha = 0.5
    shared, _ = uniform_metric(psys, alpha, 1.0, (0.3, 0.6, 0.6), (3, 3, 3), theta, theta)
    cfg = ControllerConfig(R=np.eye(1), Gamma=np.diag([0.1, 1e-5]), sigma=0.0, alpha=alpha)
    metric = lambda x, xd, th=None: shared.M
    log = simulate(lambda x, u: eval_cartpole(cp, x, u), AncmAdaptive(metric, psys, cfg, theta),
                   [0.0, 0.1, 0.0, 0.0], SimConfig(dt=0.01, T=3.0), theta_true=theta)
    E = np.array([e @ shared.M @ e for e in log.x])
    dt = np.diff(log.t)
    # discrete V' <= -2 alpha e^T M e with a 1e-3 V slack per step
    assert np.all(np.diff(log.V) / dt <= -2 * alpha * E[:-1] + 1e-3 * log.V[:-1])


# ---------------------------------------------------------------------------
# basis-function weights


def test_basis_weight_examples():
    phi = lambda x: np.array([x[0], x[1], x[0] * x[1]])
    bm = BasisFunctionModel(np.ones((2, 3)), (np.ones((2, 2)),), phi, (lambda x: np.array([1.0, x[0]]),))
    cfg = ControllerConfig(Gamma=4.0, sigma=0.0)
    x = np.array([0.5, -0.3])
    dF, dB = basis_weight_step(unit_metric, bm, x, x, [1.0], [1.0], cfg)
    assert np.allclose(dF, 0) and np.allclose(dB[0], 0)
    cfg = ControllerConfig(Gamma=4.0, sigma=0.8)
    dF, dB = basis_weight_step(unit_metric, bm, x, x, [1.0], [1.0], cfg)
    assert np.allclose(dF, -0.2 * bm.F_hat) and np.allclose(dB[0], -0.2 * bm.B_hat[0])
    # rank one: M = I, dM = 0, phi(x_d) = 0
    cfg = ControllerConfig(Gamma=4.0, sigma=0.0)
    dF, _ = basis_weight_step(unit_metric, bm, x, np.zeros(2), [1.0], [0.0], cfg)
    assert np.allclose(dF, np.outer(x, phi(x)) / 4.0)


# ---------------------------------------------------------------------------
# gain condition and bound


@pytest.mark.parametrize("kind", ["affine", "lagrangian", "ancm"])
def test_gain_closed_form_zero_error(kind):
    cfg = gain_cfg()
    cert = check_gain_condition(kind, cfg, 0.0, 0.9)
    expected = min(0.9 * 0.2 / 5.0, 0.5 * 2.0)
    assert cert.passed and abs(cert.alpha_a - expected) <= 1e-9


def test_gain_condition_needs_leakage():
    cert = check_gain_condition("ancm", gain_cfg(sigma=0.0), 0.0, 1.0)
    assert not cert.passed and cert.alpha_a == 0.0


def test_gain_condition_determinant_root():
    cfg = gain_cfg(sigma=0.02)
    eps = 0.05
    cert = check_gain_condition("ancm", cfg, eps, 1.0)
    root = closed_form_alpha_a("ancm", cfg, eps, 1.0)
    assert cert.passed and abs(cert.alpha_a - root) <= 1e-9
    C, D = gain_matrices("ancm", cfg, eps, 1.0)
    assert abs(np.linalg.det(C + 2 * root * D)) < 1e-9


@given(st.floats(0.0, 0.5), st.floats(0.01, 2.0), st.floats(0.05, 3.0), st.floats(0.1, 2.0),
       st.sampled_from(["affine", "lagrangian", "ancm", "basis"]))
def test_gain_condition_soundness(eps, sigma, gamma, a_ncm, kind):
    cfg = gain_cfg(sigma=sigma, gamma=gamma)
    cert = check_gain_condition(kind, cfg, eps, a_ncm)
    C, D = gain_matrices(kind, cfg, eps, a_ncm)
    if cert.passed:
        assert max_eig(C + 2 * cert.alpha_a * D) <= 1e-9
        assert max_eig(C + 2 * cert.alpha_a * (1 + 1e-6) * D) > -1e-9 or cert.alpha_a == min(
            -C[i, i] / (2 * D[i, i]) for i in range(C.shape[0]))
    else:
        assert max_eig(C) > -1e-12 or cert.alpha_a == 0.0


def test_basis_block_size():
    cfg = gain_cfg(m=2)
    C, D = gain_matrices("basis", cfg, 0.1, 1.0)
    assert C.shape == (4, 4) and np.allclose(C[0, 1:], 1.2 * 0.1)


def test_tracking_bound_limits():
    cfg = gain_cfg()
    cert = check_gain_condition("ancm", cfg, 0.0, 1.0)
    V0 = 2.5
    assert abs(tracking_error_bound(cert, V0, 0.0) - np.sqrt(5.0 * V0)) < 1e-12
    far = tracking_error_bound(cert, V0, 1e6)
    assert abs(far - np.sqrt(5.0) * cert.d_bar_a / cert.alpha_a) < 1e-9
    # d_bar_a = sigma sqrt(gamma_up) theta_bar + d_bar / sqrt(omega_lower)
    assert abs(cert.d_bar_a - (0.5 * np.sqrt(2.0) * 3.0 + 0.1 / np.sqrt(0.2))) < 1e-12
    pure = GainCertificate("ancm", 0.3, np.zeros((2, 2)), True, d_bar_a=0.0, omega_upper=4.0)
    t = np.linspace(0, 5, 11)
    assert np.allclose(tracking_error_bound(pure, 1.0, t), 2.0 * np.exp(-0.3 * t))
    with pytest.raises(ValueError):
        tracking_error_bound(check_gain_condition("ancm", gain_cfg(sigma=0.0), 0.0, 1.0), 1.0, 0.0)
    with pytest.raises(ValueError):
        tracking_error_bound(cert, -1.0, 0.0)


def test_certificate_text():
    text = check_gain_condition("ancm", gain_cfg(), 0.0, 1.0).text()
    keys = [line.split(":")[0] for line in text.strip().splitlines()]
    assert keys == ["kind", "passed", "alpha_a", "d_bar_a", "omega_upper", "matrix"]


def test_config_invariants():
    with pytest.raises(ValueError):
        ControllerConfig(sigma=-1.0)
    with pytest.raises(ValueError):
        ControllerConfig(Gamma=np.diag([1.0, -1.0]))
    assert ControllerConfig(Gamma=np.diag([0.5, 3.0])).gamma_bounds == (0.5, 3.0)


# ---------------------------------------------------------------------------
# CLF-QP


def grid_clf(A, alpha, e):
    best = (np.inf, None, None)
    for K in np.linspace(-3, 1, 401):
        p = max(0.0, 2 * (A + K) + 2 * alpha)  # smallest feasible slack; negative p only costs more
        p_lo = 2 * (A + K) + 2 * alpha
        p = p_lo if p_lo > 0 else 0.0
        cost = (K * e) ** 2 + p**2
        if cost < best[0]:
            best = (cost, K, p)
    return best


@pytest.mark.parametrize("A,e,K_star,p_star", [(-2.0, 1.0, 0.0, 0.0), (1.0, 1.0, -1.6, 0.8)])
def test_clf_qp_scalar_examples(A, e, K_star, p_star):
    cfg = ControllerConfig(alpha=1.0)
    res = clf_qp_gain(unit_metric, scalar_system(A), np.array([e]), np.zeros(1), None, cfg,
                      A=np.array([[A]]), B=np.eye(1))
    assert abs(res.K[0, 0] - K_star) < 1e-6 and abs(res.p - p_star) < 1e-6
    cost, Kg, pg = grid_clf(A, 1.0, e)
    assert abs(res.objective - cost) < 1e-4 and abs(res.K[0, 0] - Kg) < 1e-2 + 1e-6


def test_clf_qp_random_instances_feasible():
    rng = np.random.default_rng(5)
    cfg = ControllerConfig(alpha=0.5)
    for _ in range(5):
        A = rng.standard_normal((2, 2))
        B = rng.standard_normal((2, 1))
        L = rng.standard_normal((2, 2))
        M = L @ L.T + np.eye(2)
        res = clf_qp_gain(lambda a, b, c=None: M, None, rng.standard_normal(2), np.zeros(2), None, cfg, A=A, B=B)
        assert res.p >= -1e-8 and np.all(np.isfinite(res.K))


def test_clf_qp_zero_slack_when_robust_gain_works():
    A = np.array([[-1.0, 1.0], [-1.0, -1.0]])
    B = np.array([[0.0], [1.0]])
    M = np.eye(2)
    K = -B.T @ M
    lhs = M @ (A + B @ K)
    assert max_eig(lhs + lhs.T + 2 * 0.2 * M) < 0
    res = clf_qp_gain(lambda a, b, c=None: M, None, np.array([0.5, -0.5]), np.zeros(2), None,
                      ControllerConfig(alpha=0.2), A=A, B=B)
    assert abs(res.p) < 1e-6


# ---------------------------------------------------------------------------
# Bregman scaling


def test_bregman_examples():
    rate = np.array([0.3, -1.2, 2.0])
    th = np.array([0.1, 0.2, 0.3])
    assert np.allclose(bregman_adaptation_wrap(rate, l2_potential_hessian, th), rate)
    D = np.array([2.0, 4.0, 0.5])
    assert np.allclose(bregman_adaptation_wrap(rate, quadratic_potential_hessian(D), th), rate / D)
    with pytest.raises(SingularHessian):
        bregman_adaptation_wrap(rate, lambda t: np.diag([1.0, 0.0, 1.0]), th)


def test_smoothed_l1_gives_sparser_estimate():
    # over-parameterized regression: every feature is a scaled copy of one signal
    w = np.array([1.0, 0.9, 0.8, 0.7, 0.6])
    theta_star = np.array([1.0, 0.0, 0.0, 0.0, 0.0])

    def run(hess):
        def deriv(t, th):
            phi = w * np.sin(t)
            base = -phi * (phi @ th - phi @ theta_star)
            return bregman_adaptation_wrap(base, hess, th)
        return integrate_rk4(deriv, np.zeros(5), 0.01, 200.0).x[-1]

    l2 = run(l2_potential_hessian)
    l1 = run(smoothed_l1_hessian(0.05))
    assert abs(w @ l2 - 1.0) < 1e-3 and abs(w @ l1 - 1.0) < 1e-3
    # the l2 law lands on the minimum-norm solution, proportional to w
    assert np.allclose(l2 / l2[0], w, atol=1e-3)
    assert np.sum(np.abs(l1)) < np.sum(np.abs(l2)) - 0.1
    assert np.max(np.abs(l1)) / np.sum(np.abs(l1)) > 0.6 > np.max(np.abs(l2)) / np.sum(np.abs(l2))
