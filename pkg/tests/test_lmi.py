import numpy as np
import pytest
from hypothesis import given, strategies as st

from ancm.errors import NotSymmetric
from ancm.lmi import LmiProblem, check_lmi, dump_problem, jacobi_eig, max_eig, min_eig, solve_sdp


def test_min_eig_examples():
    assert abs(min_eig(np.eye(3)) - 1.0) < 1e-12
    assert abs(min_eig([[2.0, 1.0], [1.0, 2.0]]) - 1.0) < 1e-12
    assert abs(min_eig(np.diag([3.0, -1.0])) + 1.0) < 1e-12
    assert abs(max_eig([[2.0, 1.0], [1.0, 2.0]]) - 3.0) < 1e-12


def test_min_eig_not_symmetric():
    with pytest.raises(NotSymmetric):
        min_eig([[1.0, 2.0], [0.0, 1.0]])


@st.composite
def symmetric(draw, max_k=10):
    k = draw(st.integers(1, max_k))
    vals = draw(st.lists(st.floats(-10, 10), min_size=k * k, max_size=k * k))
    A = np.array(vals).reshape(k, k)
    return 0.5 * (A + A.T)


@given(symmetric())
def test_jacobi_reconstruction(S):
    w, V = jacobi_eig(S)
    assert np.linalg.norm(V @ np.diag(w) @ V.T - S) <= 1e-9 * max(1.0, np.linalg.norm(S))
    assert np.allclose(V.T @ V, np.eye(len(w)), atol=1e-10)
    assert np.all(np.diff(w) >= -1e-12)
    assert abs(w[0] - np.linalg.eigvalsh(S)[0]) <= 1e-10 * max(1.0, np.abs(S).max())


def test_identity_scaling():
    prob = LmiProblem()
    prob.nonneg("x")
    I = np.eye(2)
    prob.add(lambda v: I - v["x"] * I)
    prob.minimize(lambda v: v["x"])
    sol = solve_sdp(prob)
    assert sol.status == "optimal"
    assert abs(sol.values["x"] - 1.0) < 1e-6


def test_correlation_boundary():
    prob = LmiProblem()
    prob.free("c")
    prob.add(lambda v: -np.array([[1.0, v["c"]], [v["c"], 1.0]]))
    prob.minimize(lambda v: -v["c"])
    sol = solve_sdp(prob)
    assert abs(sol.values["c"] - 1.0) < 1e-6


def _lyapunov_problem(A, alpha, shift=0.0):
    prob = LmiProblem()
    prob.sym("W", 2)
    prob.nonneg("chi")
    I = np.eye(2)
    prob.add(lambda v: A @ v["W"] + v["W"] @ A.T + 2 * alpha * v["W"] + shift * I, name="decay")
    prob.add(lambda v: I - v["W"], name="lower")
    prob.add(lambda v: v["W"] - v["chi"] * I, name="upper")
    prob.minimize(lambda v: v["chi"])
    return prob


def test_lyapunov_diagonal_example():
    A = np.diag([-1.0, -2.0])
    sol = solve_sdp(_lyapunov_problem(A, 0.5))
    assert sol.status == "optimal"
    assert abs(sol.objective - 1.0) < 1e-6
    # grid oracle over diagonal W = diag(w1, w2) >= I: chi = max(w1, w2) >= 1, W = I feasible
    best = min(max(w1, w2) for w1 in np.linspace(1, 3, 41) for w2 in np.linspace(1, 3, 41)
               if max_eig(A @ np.diag([w1, w2]) * 2 + np.diag([w1, w2])) <= 0)
    assert abs(best - sol.objective) < 1e-6


def test_check_lmi_examples():
    prob = LmiProblem()
    prob.sym("W", 2)
    prob.nonneg("chi")
    I = np.eye(2)
    prob.add(lambda v: I - v["W"], name="lower")
    prob.add(lambda v: v["W"] - v["chi"] * I, name="upper")
    rep = check_lmi(prob, {"W": I, "chi": 1.0})
    assert rep.passed and np.allclose(rep.eigs, (0.0, 0.0))
    rep = check_lmi(prob, {"W": I, "chi": 0.5})
    assert not rep.passed and abs(rep.eigs[1] - 0.5) < 1e-12


def test_infeasible_detected():
    prob = LmiProblem()
    prob.nonneg("x")
    prob.add(lambda v: np.array([[1.0 + v["x"]]]))  # 1 + x <= 0 with x >= 0
    prob.minimize(lambda v: v["x"])
    sol = solve_sdp(prob)
    assert sol.status == "infeasible"
    assert sol.worst_margin > 0


def test_nonaffine_constraint_rejected():
    prob = LmiProblem()
    prob.free("x")
    prob.add(lambda v: np.array([[v["x"] ** 2 - 1.0]]))
    prob.minimize(lambda v: v["x"])
    with pytest.raises(ValueError):
        solve_sdp(prob)


def test_tightening_never_improves():
    A = np.array([[0.5, 1.0], [-1.0, -1.5]])
    base = solve_sdp(_lyapunov_problem(A, 0.2)).objective
    tight = solve_sdp(_lyapunov_problem(A, 0.2, shift=0.1)).objective
    assert tight >= base - 1e-6


def test_margins_after_solve():
    A = np.array([[-0.5, 2.0], [0.0, -1.0]])
    prob = _lyapunov_problem(A, 0.3)
    sol = solve_sdp(prob)
    assert sol.status == "optimal" and sol.worst_margin <= 1e-7
    assert check_lmi(prob, sol.values, margin=-1e-7).passed


def test_dump_problem(tmp_path):
    prob = _lyapunov_problem(np.diag([-1.0, -2.0]), 0.5)
    sol = solve_sdp(prob)
    path = tmp_path / "p.txt"
    dump_problem(prob, path, sol)
    text = path.read_text()
    assert "var W sym" in text and "status optimal" in text


def test_bad_tol():
    with pytest.raises(ValueError):
        solve_sdp(_lyapunov_problem(np.eye(2) * -1, 0.1), tol=0.0)
