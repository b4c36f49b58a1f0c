import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from oracles import projected_gradient_box_qp
from rlss.qp import (
    EPS_QP,
    QpProblem,
    QpStatus,
    is_feasible_point,
    iteration_cap,
    kkt_residuals,
    minimum_violation,
    solve,
)


def test_unconstrained_minimum_at_origin():
    s = solve(QpProblem(2 * np.eye(3), np.zeros(3)))
    assert s.ok and np.allclose(s.x, 0, atol=1e-9)


def test_active_bound():
    # min (x - 1)^2 = x^2 - 2x + 1 s.t. x <= 0; the solver drops the constant
    s = solve(QpProblem([[2.0]], [-2.0], A_in=[[1.0]], b_in=[0.0]))
    assert s.ok and abs(s.x[0]) <= 1e-9
    assert abs(s.objective + 1.0 - 1.0) <= 1e-9


def test_equality_constraint():
    s = solve(QpProblem(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0]))
    assert s.ok and np.allclose(s.x, [1, 1], atol=1e-9)


def test_infeasible_pair():
    s = solve(QpProblem([[1.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0]))
    assert s.status is QpStatus.INFEASIBLE and not s.ok


def test_phase_one_violation():
    p = QpProblem([[1.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
    assert minimum_violation(p) > 1e-5
    feasible = QpProblem([[1.0]], [0.0], A_in=[[1.0]], b_in=[1.0])
    assert minimum_violation(feasible) <= 1e-9


def test_rejects_asymmetric_and_indefinite():
    with pytest.raises(ValueError):
        QpProblem([[1.0, 1.0], [0.0, 1.0]], [0, 0])
    with pytest.raises(ValueError):
        solve(QpProblem([[-1.0]], [0.0]))


def test_polish_mode_validated():
    with pytest.raises(ValueError):
        solve(QpProblem([[1.0]], [0.0]), polish="sometimes")


def test_feasible_point_tolerance():
    p = QpProblem([[1.0]], [0.0], A_in=[[1.0]], b_in=[1.0])
    assert is_feasible_point(p, [0.5])
    assert is_feasible_point(p, [1 + 1e-9])
    assert not is_feasible_point(p, [1 + 1e-5])


def test_feasible_point_matches_residuals():
    rng = np.random.default_rng(0)
    for _ in range(50):
        G = rng.normal(size=(4, 3))
        h = rng.normal(size=4)
        p = QpProblem(np.eye(3), np.zeros(3), A_in=G, b_in=h)
        x = rng.normal(size=3)
        assert is_feasible_point(p, x) == bool(np.all(G @ x - h <= EPS_QP))


def test_iteration_cap_formula():
    p = QpProblem(np.eye(5), np.zeros(5), A_in=np.ones((3, 5)), b_in=np.ones(3))
    assert iteration_cap(p) == 10 * (5 + 3) + 1000


def test_matches_projected_gradient_oracle():
    rng = np.random.default_rng(42)
    M = rng.normal(size=(5, 5))
    Q = M @ M.T + np.eye(5)
    q = rng.normal(size=5)
    G = rng.normal(size=(3, 5))
    h = rng.normal(size=3) - 0.5
    s = solve(QpProblem(Q, q, A_in=G, b_in=h))
    x_ref = projected_gradient_box_qp(Q, q, G, h)
    assert s.ok and np.max(np.abs(s.x - x_ref)) <= 1e-5


def test_sparse_input_and_kkt():
    rng = np.random.default_rng(1)
    Q = sp.identity(6, format="csc")
    A = sp.csr_matrix(rng.normal(size=(2, 6)))
    G = sp.csr_matrix(rng.normal(size=(4, 6)))
    p = QpProblem(Q, rng.normal(size=6), A_eq=A, b_eq=np.zeros(2), A_in=G, b_in=np.ones(4))
    s = solve(p)
    assert s.ok
    r = kkt_residuals(p, s.x, s.y_eq, s.z_in)
    assert max(r.values()) <= EPS_QP * (1 + np.abs(p.q).max())


def _random_problem(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    M = rng.normal(size=(n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    G = rng.normal(size=(int(rng.integers(1, 6)), n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0, 1, len(G))
    return QpProblem(Q, q, A_in=G, b_in=h), G, h, rng


@given(st.integers(0, 10 ** 6))
def test_optimum_beats_feasible_points(seed):
    p, G, h, rng = _random_problem(seed)
    s = solve(p)
    assert s.ok and s.max_violation <= EPS_QP
    r = kkt_residuals(p, s.x, s.y_eq, s.z_in)
    assert max(r.values()) <= 1e-6 * (1 + np.abs(p.q).max())
    for _ in range(100):
        x = rng.normal(size=p.n) * 3
        if np.all(G @ x <= h):
            assert s.objective <= p.objective(x) + 1e-9


@given(st.integers(0, 10 ** 6))
def test_deterministic(seed):
    p, *_ = _random_problem(seed)
    a, b = solve(p), solve(p)
    assert a.status is b.status and np.array_equal(a.x, b.x)
