import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piecewise_mpc.ftocp import FtocpSpec, transcribe
from piecewise_mpc.nlp import (INFEASIBLE, NUMERIC_FAIL, OPTIMAL, NlpProblem, QPInfeasible,
                               SolverOptions, check_derivatives, solve, solve_qp)


def quadratic_problem(H, g, **kw):
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    return NlpProblem(n=g.size, objective=lambda z: 0.5 * z @ H @ z + g @ z,
                      gradient=lambda z: H @ z + g, **kw)


# ---------------------------------------------------------------------------
# QP subproblem


def _kkt_residuals(H, g, A_eq, b_eq, A_in, b_in, res):
    x = res.x
    stat = H @ x + g + A_eq.T @ res.lam_eq + A_in.T @ res.lam_in
    return (np.max(np.abs(stat)), np.max(np.abs(A_eq @ x - b_eq), initial=0.0),
            np.max(A_in @ x - b_in, initial=0.0), np.min(res.lam_in, initial=0.0),
            np.max(np.abs(res.lam_in * (A_in @ x - b_in)), initial=0.0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), m_eq=st.integers(0, 2),
       m_in=st.integers(0, 8))
def test_qp_kkt_conditions(seed, n, m_eq, m_in):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    m_eq = min(m_eq, n)
    A_eq = rng.normal(size=(m_eq, n))
    A_in = rng.normal(size=(m_in, n))
    # a strictly feasible point makes the QP feasible
    x_feas = rng.normal(size=n)
    b_eq = A_eq @ x_feas
    b_in = A_in @ x_feas + rng.uniform(0.1, 1.0, m_in)
    res = solve_qp(H, g, A_eq, b_eq, A_in, b_in)
    stat, eq, ineq, dual, comp = _kkt_residuals(H, g, A_eq, b_eq, A_in, b_in, res)
    assert stat <= 1e-8 * max(1.0, np.abs(g).max())
    assert eq <= 1e-9 and ineq <= 1e-9
    assert dual >= -1e-12
    assert comp <= 1e-8


def test_qp_unconstrained_matches_linear_solve():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([1.0, -2.0])
    res = solve_qp(H, g)
    np.testing.assert_allclose(res.x, np.linalg.solve(H, -g), atol=1e-12)


def test_qp_infeasible_raises():
    A_in = np.array([[1.0], [-1.0]])
    b_in = np.array([-1.0, -1.0])  # x <= -1 and x >= 1
    with pytest.raises(QPInfeasible):
        solve_qp(np.eye(1), np.zeros(1), A_in=A_in, b_in=b_in)


# ---------------------------------------------------------------------------
# SQP examples


def _assert_kkt(sol, opts=SolverOptions()):
    assert sol.status == OPTIMAL
    assert sol.stationarity <= opts.tol_kkt
    assert sol.feasibility <= opts.tol_feas
    assert sol.complementarity <= opts.tol_kkt


@pytest.mark.parametrize("hessian", ["bfgs", "exact"])
def test_unconstrained_scalar(hessian):
    prob = NlpProblem(n=1, objective=lambda z: (z[0] - 1.0) ** 2,
                      gradient=lambda z: np.array([2.0 * (z[0] - 1.0)]),
                      lagrangian_hessian=lambda z, le, li: np.array([[2.0]]))
    sol = solve(prob, np.zeros(1), SolverOptions(hessian=hessian))
    _assert_kkt(sol)
    assert sol.z[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.objective == pytest.approx(0.0, abs=1e-10)


def test_equality_constrained_symmetric():
    prob = quadratic_problem(2 * np.eye(2), np.zeros(2), eq=lambda z: np.array([z[0] + z[1] - 1.0]),
                             eq_jac=lambda z: np.array([[1.0, 1.0]]))
    sol = solve(prob, np.array([3.0, -1.0]))
    _assert_kkt(sol)
    np.testing.assert_allclose(sol.z, [0.5, 0.5], atol=1e-6)


# [DERIVED] brute force over a 1e-3 grid of the feasible set gives (1, 1)
GRID_OPTIMUM = np.array([1.0, 1.0])


def _inequality_example():
    return NlpProblem(
        n=2, objective=lambda z: (z[0] - 2) ** 2 + (z[1] - 2) ** 2,
        gradient=lambda z: 2 * (z - 2),
        ineq=lambda z: np.array([z[0] + z[1] - 2.0]), ineq_jac=lambda z: np.array([[1.0, 1.0]]),
        lb=np.zeros(2))


def test_inequality_example_grid_oracle():
    # the frozen grid optimum is reproduced by the brute force itself
    g = np.linspace(0.0, 2.0, 2001)
    Z1, Z2 = np.meshgrid(g, g, indexing="ij")
    f = np.where(Z1 + Z2 <= 2.0 + 1e-12, (Z1 - 2) ** 2 + (Z2 - 2) ** 2, np.inf)
    k = np.unravel_index(np.argmin(f), f.shape)
    np.testing.assert_allclose([g[k[0]], g[k[1]]], GRID_OPTIMUM, atol=1e-3)

    for z0 in ([0.0, 0.0], [5.0, 0.1], [0.3, 3.0]):
        sol = solve(_inequality_example(), np.array(z0))
        _assert_kkt(sol)
        np.testing.assert_allclose(sol.z, GRID_OPTIMUM, atol=1e-4)


def test_nonconvex_rosenbrock_with_constraint():
    # min Rosenbrock s.t. z1^2 + z2^2 <= 1: known optimum near (0.7864, 0.6177)
    prob = NlpProblem(
        n=2, objective=lambda z: (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2,
        gradient=lambda z: np.array([-2 * (1 - z[0]) - 400 * z[0] * (z[1] - z[0] ** 2),
                                     200 * (z[1] - z[0] ** 2)]),
        ineq=lambda z: np.array([z @ z - 1.0]), ineq_jac=lambda z: 2 * z[None, :])
    sol = solve(prob, np.zeros(2), SolverOptions(max_iter=500))
    _assert_kkt(sol)
    np.testing.assert_allclose(sol.z, [0.78641515, 0.61769831], atol=1e-5)


def test_contradictory_constraints_report_infeasible():
    prob = quadratic_problem(np.eye(1), np.zeros(1),
                             eq=lambda z: np.array([z[0] - 1.0, z[0] - 2.0]),
                             eq_jac=lambda z: np.ones((2, 1)))
    sol = solve(prob, np.zeros(1))
    assert sol.status == INFEASIBLE
    assert not sol.ok


def test_nonfinite_objective_is_numeric_fail():
    prob = NlpProblem(n=1, objective=lambda z: np.nan, gradient=lambda z: np.zeros(1))
    assert solve(prob, np.zeros(1)).status == NUMERIC_FAIL


def test_merit_decreases_on_accepted_steps():
    sol = solve(_inequality_example(), np.array([5.0, 0.1]))
    assert sol.merit_history
    for before, after in sol.merit_history:
        assert after <= before + 1e-12


def test_solver_is_deterministic():
    a = solve(_inequality_example(), np.array([5.0, 0.1]))
    b = solve(_inequality_example(), np.array([5.0, 0.1]))
    assert a.z.tobytes() == b.z.tobytes()
    assert a.iterations == b.iterations
    assert a.merit_history == b.merit_history


# ---------------------------------------------------------------------------
# derivative checker


def test_derivative_check_exact_gradient():
    H = np.array([[3.0, 1.0], [1.0, 2.0]])
    rep = check_derivatives(quadratic_problem(H, np.array([1.0, -1.0])), np.array([0.7, -1.3]))
    assert rep["gradient"] <= 1e-7


def test_derivative_check_flags_wrong_gradient():
    prob = NlpProblem(n=1, objective=lambda z: z[0] ** 2, gradient=lambda z: z[:1].copy())
    rep = check_derivatives(prob, np.array([3.0]))
    assert rep["gradient"] == pytest.approx(0.5, abs=1e-6)


def test_derivative_check_slip_transcription(slip_nominal):
    _, system, cost, stored = slip_nominal
    rng = np.random.default_rng(0)
    N = 30
    for t0 in (0, 20, 45, 70):
        spec = FtocpSpec(system, cost, stored.x[t0], stored.x[t0 + N], 0.0,
                         stored.regions[t0:t0 + N])
        prob = transcribe(spec)
        X = stored.x[t0:t0 + N + 1] + 1e-4 * rng.standard_normal((N + 1, 8))
        U = stored.u[t0:t0 + N] + 1e-3 * rng.standard_normal((N, 4))
        z = np.concatenate([X.ravel(), U.ravel()])
        rep = check_derivatives(prob, z)
        assert max(rep.values()) <= 1e-5, rep
