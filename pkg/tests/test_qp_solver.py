import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from services.qp_solver import QpProblem, QpStatus, kkt_residuals, solve_qp
from utils.errors import ContractViolationError


def _random_problem(rng, n=5, extra_rows=3):
    m_factor = rng.normal(size=(n, n))
    p_matrix = m_factor.T @ m_factor + np.eye(n)
    a_matrix = np.vstack([np.eye(n), rng.normal(size=(extra_rows, n))])
    m = a_matrix.shape[0]
    return QpProblem(P=sp.csc_matrix(p_matrix), q=rng.normal(scale=3.0, size=n), A=sp.csc_matrix(a_matrix),
                     lb=-np.ones(m), ub=np.ones(m))


def _active_set_oracle(problem, max_active=None):
    """Перебор активных множеств: решение KKT с проверкой допустимости и знаков множителей"""
    p_matrix = problem.P.toarray()
    a_matrix = problem.A.toarray()
    n, m = problem.n, problem.m
    max_active = n if max_active is None else max_active
    for assignment in itertools.product((0, -1, 1), repeat=m):
        active = [i for i, s in enumerate(assignment) if s != 0]
        if len(active) > max_active:
            continue
        a_active = a_matrix[active]
        targets = np.array([problem.ub[i] if assignment[i] > 0 else problem.lb[i] for i in active])
        kkt = np.block([[p_matrix, a_active.T], [a_active, np.zeros((len(active), len(active)))]])
        try:
            solution = np.linalg.solve(kkt, np.concatenate([-problem.q, targets]))
        except np.linalg.LinAlgError:
            continue
        z, y_active = solution[:n], solution[n:]
        az = a_matrix @ z
        if np.any(az < problem.lb - 1e-9) or np.any(az > problem.ub + 1e-9):
            continue
        signs = np.array([assignment[i] for i in active])
        if np.any(signs * y_active < -1e-9):
            continue
        return z
    raise AssertionError("oracle found no KKT point")


def test_unconstrained_quadratic():
    problem = QpProblem(P=sp.csc_matrix([[1.0]]), q=[-2.0], A=None, lb=None, ub=None)
    solution = solve_qp(problem)
    assert solution.status == QpStatus.SOLVED
    assert_allclose(solution.z, [2.0], atol=1e-6)


def test_active_upper_bound_has_positive_multiplier():
    problem = QpProblem(P=sp.csc_matrix([[1.0]]), q=[-2.0], A=sp.csc_matrix([[1.0]]), lb=[-1.0], ub=[1.0])
    solution = solve_qp(problem)
    assert solution.solved
    assert_allclose(solution.z, [1.0], atol=1e-6)
    assert_allclose(solution.y, [1.0], atol=1e-5)


def test_random_problems_match_active_set_oracle(rng):
    for _ in range(50):
        problem = _random_problem(rng)
        solution = solve_qp(problem)
        assert solution.solved
        expected = _active_set_oracle(problem)
        assert_allclose(solution.z, expected, atol=1e-5)
        assert problem.objective(solution.z) == pytest.approx(problem.objective(expected), abs=1e-6)


def test_kkt_residuals_of_solution(rng):
    for _ in range(10):
        problem = _random_problem(rng)
        solution = solve_qp(problem)
        primal, dual, complementarity = kkt_residuals(problem, solution)
        assert primal <= 1e-5
        assert dual <= 1e-5
        assert complementarity <= 1e-5


def test_solution_is_invariant_to_objective_scaling(rng):
    problem = _random_problem(rng)
    scaled = QpProblem(P=10.0 * problem.P, q=10.0 * problem.q, A=problem.A, lb=problem.lb, ub=problem.ub)
    assert_allclose(solve_qp(scaled).z, solve_qp(problem).z, atol=1e-5)


def test_small_perturbation_moves_solution_little(rng):
    problem = _random_problem(rng)
    perturbed = QpProblem(P=problem.P, q=problem.q + 1e-4, A=problem.A, lb=problem.lb, ub=problem.ub)
    shift = np.linalg.norm(solve_qp(perturbed).z - solve_qp(problem).z, np.inf)
    assert shift <= 1e-2


def test_warm_start_is_not_slower(rng):
    faster_or_equal = 0
    for _ in range(20):
        problem = _random_problem(rng)
        base = solve_qp(problem)
        perturbed = QpProblem(P=problem.P, q=problem.q + rng.normal(scale=1e-3, size=problem.n),
                              A=problem.A, lb=problem.lb, ub=problem.ub)
        cold = solve_qp(perturbed)
        warm = solve_qp(perturbed, warm=base)
        assert warm.solved
        if warm.iterations <= cold.iterations:
            faster_or_equal += 1
    assert faster_or_equal >= 16


def test_mismatched_warm_start_is_ignored(rng):
    problem = _random_problem(rng)
    other = solve_qp(_random_problem(rng, n=3))
    solution = solve_qp(problem, warm=other)
    assert solution.solved


def test_equilibration_does_not_change_solution(rng):
    problem = _random_problem(rng)
    plain = solve_qp(problem, scaling=0)
    equilibrated = solve_qp(problem)
    assert plain.solved and equilibrated.solved
    assert_allclose(equilibrated.z, plain.z, atol=1e-5)
    assert_allclose(equilibrated.y, plain.y, atol=1e-4)


def test_badly_scaled_problem_matches_active_set_oracle(rng):
    for _ in range(10):
        problem = _random_problem(rng)
        d = np.logspace(-2.0, 2.0, problem.n)
        scale = sp.diags(d)
        badly_scaled = QpProblem(P=sp.csc_matrix(scale @ problem.P @ scale), q=d * problem.q,
                                 A=sp.csc_matrix(problem.A @ scale), lb=problem.lb, ub=problem.ub)
        solution = solve_qp(badly_scaled)
        assert solution.solved
        assert_allclose(d * solution.z, _active_set_oracle(problem), atol=1e-4)


def test_primal_infeasible_problem():
    problem = QpProblem(P=sp.csc_matrix([[1.0]]), q=[0.0], A=sp.csc_matrix([[1.0], [1.0]]),
                        lb=[1.0, -np.inf], ub=[np.inf, 0.0])
    assert solve_qp(problem).status == QpStatus.PRIMAL_INFEASIBLE


def test_unbounded_problem_is_dual_infeasible():
    problem = QpProblem(P=sp.csc_matrix((1, 1)), q=[-1.0], A=None, lb=None, ub=None)
    assert solve_qp(problem).status == QpStatus.DUAL_INFEASIBLE


def test_from_triplets_builds_symmetric_hessian():
    problem = QpProblem.from_triplets(2, [(0, 0, 2.0), (0, 1, 0.5), (1, 1, 1.0)], np.zeros(2),
                                      1, [(0, 0, 1.0), (0, 1, 1.0)], [1.0], [1.0])
    assert_allclose(problem.P.toarray(), [[2.0, 0.5], [0.5, 1.0]])
    solution = solve_qp(problem)
    assert solution.solved
    assert solution.z.sum() == pytest.approx(1.0, abs=1e-6)


def test_lower_triangle_triplets_are_rejected():
    with pytest.raises(ContractViolationError):
        QpProblem.from_triplets(2, [(1, 0, 1.0)], np.zeros(2), 0, [], np.zeros(0), np.zeros(0))


def test_inverted_bounds_are_rejected():
    with pytest.raises(ContractViolationError):
        QpProblem(P=sp.csc_matrix([[1.0]]), q=[0.0], A=sp.csc_matrix([[1.0]]), lb=[1.0], ub=[0.0])
