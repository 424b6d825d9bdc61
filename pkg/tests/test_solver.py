import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from resdmpc.errors import DerivativeFailure
from resdmpc.solver import (NlpProblem, Status, fd_jacobian, fd_jacobian_batched, l1_split, solve,
                            solve_qp_dense, solve_qp_sparse)


def test_active_lower_bound():
    prob = NlpProblem(1, lambda v: float(v[0] ** 2), ineq_constraints=lambda v: np.array([1 - v[0]]))
    rep = solve(prob, np.array([3.0]))
    assert rep.status is Status.CONVERGED
    assert rep.solution[0] == pytest.approx(1.0, abs=1e-6)


def test_projection_onto_halfspace():
    prob = NlpProblem(2, lambda v: float(np.sum((v - [3, 4]) ** 2)),
                      ineq_constraints=lambda v: np.array([v[0] + v[1] - 5]))
    rep = solve(prob, np.zeros(2))
    assert rep.converged
    assert np.allclose(rep.solution, [2, 3], atol=1e-6)


def test_contradictory_equalities_are_infeasible():
    prob = NlpProblem(1, lambda v: float(v[0] ** 2),
                      eq_constraints=lambda v: np.array([v[0], v[0] - 1.0]))
    rep = solve(prob, np.array([0.5]))
    assert rep.status is Status.INFEASIBLE


def test_nonlinear_equality_on_circle():
    # min x + y on the unit circle -> (-1/sqrt2, -1/sqrt2)
    prob = NlpProblem(2, lambda v: float(v.sum()),
                      eq_constraints=lambda v: np.array([v @ v - 1.0]))
    rep = solve(prob, np.array([1.0, 0.2]))
    assert rep.converged
    assert np.allclose(rep.solution, -np.sqrt(0.5), atol=1e-5)


def test_rosenbrock_with_bounds_matches_scipy():
    f = lambda v: float(100 * (v[1] - v[0] ** 2) ** 2 + (1 - v[0]) ** 2)
    prob = NlpProblem(2, f, lower=np.array([-2, -2.0]), upper=np.array([0.8, 2.0]))
    rep = solve(prob, np.array([-1.2, 1.0]), max_iter=500)
    ref = minimize(f, [-1.2, 1.0], bounds=[(-2, 0.8), (-2, 2)], method="L-BFGS-B", tol=1e-12)
    assert rep.converged
    assert np.allclose(rep.solution, ref.x, atol=1e-4)


def test_starting_point_is_clipped_into_the_box():
    prob = NlpProblem(1, lambda v: float((v[0] - 5) ** 2), lower=np.zeros(1), upper=np.ones(1))
    rep = solve(prob, np.array([-7.0]))
    assert rep.solution[0] == pytest.approx(1.0)


def test_l1_split_definition():
    sp_ = l1_split(2)
    v = sp_.split([-2.0, 3.0])
    assert np.array_equal(v, [0, 3, 2, 0])
    assert sp_.cost(v) == 5
    assert np.array_equal(sp_.combine(v), [-2, 3])
    assert sp_.cost(sp_.split([0.0, 0.0])) == 0
    assert np.array_equal(sp_.combine_matrix() @ v, [-2, 3])


def test_l1_split_rejects_empty():
    with pytest.raises(ValueError):
        l1_split(0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_l1_split_is_tight_at_the_optimum(seed):
    rng = np.random.default_rng(seed)
    n, m = 3, 4
    A = rng.normal(size=(m, n))
    b = A @ rng.normal(size=n)
    sp_ = l1_split(n)
    M = sp_.combine_matrix()
    eps = 0.1
    prob = NlpProblem(2 * n, lambda v: sp_.cost(v),
                      ineq_constraints=lambda v: np.array([np.sum((A @ M @ v - b) ** 2) - eps ** 2]),
                      lower=sp_.lower(), upper=sp_.upper(),
                      objective_grad=lambda v: sp_.cost_vector())
    rep = solve(prob, np.zeros(2 * n), tol_feas=1e-8, max_iter=300)
    if rep.converged:
        v = rep.solution
        assert np.max(np.minimum(v[:n], v[n:])) <= 1e-6


def test_fd_linear_map_exact():
    A = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
    J = fd_jacobian(lambda v: A @ v, np.array([0.3, -1.0, 2.0]))
    assert np.allclose(J, A, atol=1e-9)


def test_fd_sine():
    J = fd_jacobian(np.sin, np.array([0.3]))
    assert J[0, 0] == pytest.approx(np.cos(0.3), abs=1e-8)


def test_fd_square():
    assert fd_jacobian(lambda v: v ** 2, np.array([2.0]))[0, 0] == pytest.approx(4.0, abs=1e-7)


def test_fd_non_finite_raises():
    with pytest.raises(DerivativeFailure):
        fd_jacobian(lambda v: np.log(v), np.array([0.0]))


def test_fd_error_is_second_order():
    f = lambda v: np.exp(v)
    x = np.array([0.7])
    errs = [abs(fd_jacobian(f, x, h)[0, 0] - np.exp(0.7)) for h in (1e-2, 5e-3)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_fd_batched_matches_rowwise():
    rng = np.random.default_rng(1)
    V = rng.normal(size=(4, 3))
    fn = lambda X: np.column_stack([np.sin(X[:, 0]) * X[:, 1], X[:, 2] ** 3])
    Jb = fd_jacobian_batched(fn, V)
    for i in range(4):
        Ji = fd_jacobian(lambda v: fn(v[None, :])[0], V[i])
        assert np.allclose(Jb[i], Ji, atol=1e-9)


def random_qp(seed, n=5, m_eq=1, m_in=4):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m_eq, n))
    x_feas = rng.uniform(-1, 1, n)
    b = A @ x_feas
    G = rng.normal(size=(m_in, n))
    h = G @ x_feas + rng.uniform(0, 1, m_in)
    return H, c, A, b, G, h, -2 * np.ones(n), 2 * np.ones(n)


def qp_reference(H, c, A, b, G, h, lb, ub):
    res = minimize(lambda x: 0.5 * x @ H @ x + c @ x, np.zeros(c.size), jac=lambda x: H @ x + c,
                   constraints=[{"type": "eq", "fun": lambda x: A @ x - b, "jac": lambda x: A},
                                {"type": "ineq", "fun": lambda x: h - G @ x, "jac": lambda x: -G}],
                   bounds=list(zip(lb, ub)), method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def test_hundred_random_qps_dense_and_sparse_agree_with_reference():
    for seed in range(100):
        H, c, A, b, G, h, lb, ub = random_qp(seed)
        ref = qp_reference(H, c, A, b, G, h, lb, ub)
        dense = solve_qp_dense(H, c, A, b, G, h, lb, ub)
        sparse = solve_qp_sparse(sp.csr_matrix(H), c, sp.csr_matrix(A), b, sp.csr_matrix(G), h, lb, ub)
        assert dense.ok and sparse.ok
        for res in (dense, sparse):
            assert np.max(G @ res.x - h) <= 1e-7
            assert np.max(np.abs(A @ res.x - b)) <= 1e-7
            assert np.allclose(res.x, ref, atol=1e-5)
        # stationarity of the reported multipliers
        r = H @ dense.x + c + A.T @ dense.lam_eq + G.T @ dense.lam_in - dense.lam_lb + dense.lam_ub
        assert np.max(np.abs(r)) <= 1e-7


def test_converged_nlp_solves_respect_feasibility_tolerance():
    for seed in range(100):
        H, c, A, b, G, h, lb, ub = random_qp(seed, n=4, m_eq=1, m_in=3)
        prob = NlpProblem(4, lambda x: float(0.5 * x @ H @ x + c @ x),
                          eq_constraints=lambda x: A @ x - b, ineq_constraints=lambda x: G @ x - h,
                          lower=lb, upper=ub)
        rep = solve(prob, np.zeros(4))
        if rep.converged:
            assert rep.max_violation <= 1e-6
            assert np.all(G @ rep.solution - h <= 1e-6)
        ref = qp_reference(H, c, A, b, G, h, lb, ub)
        assert rep.converged and np.allclose(rep.solution, ref, atol=1e-4)


def test_dense_qp_handles_singular_hessian():
    # linear program in disguise: min -x - y on the unit box
    H = np.zeros((2, 2))
    res = solve_qp_dense(H, np.array([-1.0, -1.0]), lb=np.zeros(2), ub=np.ones(2))
    assert res.ok and np.allclose(res.x, [1, 1])


def test_dense_qp_reports_unbounded_and_infeasible():
    assert solve_qp_dense(np.zeros((1, 1)), np.array([-1.0])).status == "unbounded"
    res = solve_qp_dense(np.eye(1), np.zeros(1), A_eq=np.array([[1.0], [1.0]]), b_eq=np.array([0.0, 1.0]))
    assert res.status == "infeasible"


def test_sparse_backend_flags_infeasible():
    res = solve_qp_sparse(sp.eye(1), np.zeros(1), G=sp.csr_matrix([[1.0], [-1.0]]), h=np.array([-1.0, -1.0]))
    assert res.status == "infeasible"


def test_sparse_nlp_path():
    n = 30
    target = np.linspace(-1, 1, n)
    prob = NlpProblem(n, lambda v: float(np.sum((v - target) ** 2)),
                      objective_grad=lambda v: 2 * (v - target),
                      eq_constraints=lambda v: np.array([v.sum()]),
                      eq_jacobian=lambda v: sp.csr_matrix(np.ones((1, n))),
                      hessian=lambda v, le, li: sp.identity(n, format="csr") * 2.0,
                      lower=np.full(n, -0.5), sparse=True)
    rep = solve(prob, np.zeros(n))
    assert rep.converged
    assert rep.solution.sum() == pytest.approx(0.0, abs=1e-8)
    assert rep.solution.min() >= -0.5 - 1e-9
