import numpy as np
import pytest
from numpy.testing import assert_allclose

from grid.field import AxisSpec, GridField
from services.bench_service import sample_initial_states
from services.reachability_service import (
    HjbConfig,
    brute_force_value,
    hamiltonian,
    lf_dissipation,
    optimal_safe_control,
    safe_policy_rollout,
    safe_set_membership,
    solve_converged,
)
from systems.base import ControlBox, Obstacle
from systems.benchmarks import DoubleIntegrator1D, Integrator1D, PointMass2D
from utils.errors import ContractViolationError, DegenerateDynamicsError, RefusalError


class _FrozenIntegrator(Integrator1D):
    G = np.zeros((1, 1))


@pytest.fixture(scope='module')
def integrator_solution():
    system = Integrator1D(ControlBox([-1.0], [1.0]), goal=[0.5], grid_axes=[AxisSpec(-2.0, 2.0, 41)])
    return system, solve_converged(system)


@pytest.fixture(scope='module')
def double_integrator_solution():
    system = DoubleIntegrator1D(ControlBox([-1.0], [1.0]), goal=[2.0],
                                grid_axes=[AxisSpec(-1.0, 3.0, 51), AxisSpec(-2.0, 2.0, 51)])
    return system, solve_converged(system)


def test_hamiltonian_of_integrator(integrator):
    assert hamiltonian(integrator, np.array([0.0]), np.array([2.0])) == pytest.approx(2.0)
    assert hamiltonian(integrator, np.array([0.3]), np.array([-0.5])) == pytest.approx(0.5)


def test_hamiltonian_of_double_integrator(double_integrator):
    value = hamiltonian(double_integrator, np.array([0.0, 1.5]), np.array([0.4, -2.0]))
    assert value == pytest.approx(0.4 * 1.5 + 2.0)


def test_hamiltonian_matches_best_corner(arm, rng):
    for _ in range(5):
        x = rng.uniform(-1.0, 1.0, size=4)
        p = rng.normal(size=4)
        corner_values = [p @ arm.dynamics(x, u) for u in arm.controls.corners()]
        samples = arm.controls.lower + rng.uniform(size=(200, 2)) * (arm.controls.upper - arm.controls.lower)
        sample_values = [p @ arm.dynamics(x, u) for u in samples]
        h = hamiltonian(arm, x, p)
        assert h == pytest.approx(max(corner_values), abs=1e-9)
        assert h >= max(sample_values) - 1e-9


def test_hamiltonian_rejects_wrong_costate(integrator):
    with pytest.raises(ContractViolationError):
        hamiltonian(integrator, np.array([0.0]), np.array([1.0, 2.0]))


def test_hamiltonian_dominates_admissible_controls(double_integrator, point_mass, rng):
    for system in (double_integrator, point_mass):
        box = system.controls
        for _ in range(5):
            x = rng.uniform(-1.0, 1.0, size=system.n_x)
            p = rng.normal(size=system.n_x)
            h = hamiltonian(system, x, p)
            controls = rng.uniform(box.lower, box.upper, size=(100, system.n_u))
            values = np.array([p @ system.dynamics(x, u) for u in controls])
            assert np.all(values <= h + 1e-12)


def test_optimal_safe_control_is_bang_bang(double_integrator):
    assert_allclose(optimal_safe_control(double_integrator, np.zeros(2), np.array([0.0, 1.0])), [1.0])
    assert_allclose(optimal_safe_control(double_integrator, np.zeros(2), np.array([0.0, -3.0])), [-1.0])


def test_optimal_safe_control_tie_uses_midpoint():
    system = Integrator1D(ControlBox([-1.0], [3.0]), goal=[0.0], grid_axes=[AxisSpec(-2.0, 2.0, 5)])
    assert_allclose(optimal_safe_control(system, np.zeros(1), np.zeros(1)), [1.0])


def test_lf_dissipation_coefficients(integrator, double_integrator):
    integrator_grid = GridField.from_function(integrator.grid_axes, integrator.constraint_l)
    assert_allclose(lf_dissipation(integrator, integrator_grid), [1.0])
    di_grid = GridField.from_function(double_integrator.grid_axes, double_integrator.constraint_l)
    assert_allclose(lf_dissipation(double_integrator, di_grid), [2.0, 1.0])


def test_lf_dissipation_rejects_vanishing_dynamics():
    system = _FrozenIntegrator(ControlBox([-1.0], [1.0]), goal=[0.0], grid_axes=[AxisSpec(-1.0, 1.0, 11)])
    grid = GridField.from_function(system.grid_axes, system.constraint_l)
    with pytest.raises(DegenerateDynamicsError):
        lf_dissipation(system, grid)


def test_hjb_config_validation():
    with pytest.raises(ContractViolationError):
        HjbConfig(cfl=1.5)
    with pytest.raises(ContractViolationError):
        HjbConfig(max_steps=0)


def test_integrator_value_matches_analytic(integrator_solution):
    system, value_fn = integrator_solution
    nodes = value_fn.field.node_points()
    error = np.max(np.abs(value_fn.field.flat_values - (1.0 - np.abs(nodes[:, 0]))))
    assert value_fn.provenance['converged']
    assert error <= 2 * 0.1


def test_value_never_exceeds_constraint(integrator_solution, double_integrator_solution):
    for system, value_fn in (integrator_solution, double_integrator_solution):
        assert value_fn.max_violation_of_upper_bound(system) <= 1e-12


def test_value_sweeps_are_monotone(integrator):
    short = solve_converged(integrator, config=HjbConfig(max_steps=2))
    longer = solve_converged(integrator, config=HjbConfig(max_steps=6))
    assert np.all(longer.field.values <= short.field.values + 1e-12)
    assert not short.provenance['converged']
    assert short.provenance['status'] == 'max_steps'


def test_double_integrator_value_matches_analytic(double_integrator_solution):
    system, value_fn = double_integrator_solution
    nodes = value_fn.field.node_points()
    error = np.max(np.abs(value_fn.field.flat_values - system.analytic_value(nodes)))
    assert error <= 5 * 0.08


def test_provenance_records_solver_settings(double_integrator_solution):
    _, value_fn = double_integrator_solution
    for key in ('steps', 'residual', 'wall_time_s', 'dt', 'alpha', 'cfl'):
        assert key in value_fn.provenance
    assert 0.0 < value_fn.safe_volume_fraction() < 1.0


def test_safe_set_membership(double_integrator_solution):
    _, value_fn = double_integrator_solution
    assert safe_set_membership(value_fn, np.array([1.0, 0.0]), 0.0)
    assert not safe_set_membership(value_fn, np.array([0.2, -1.5]), 0.0)


def test_safe_policy_rollout_brakes_in_time(double_integrator_solution):
    system, value_fn = double_integrator_solution
    trajectory = safe_policy_rollout(system, value_fn, np.array([1.0, -1.0]), 3.0, 0.01)
    assert trajectory.states.shape == (301, 2)
    assert trajectory.controls.shape == (300, 1)
    assert trajectory.info['min_l'] == pytest.approx(0.5, abs=0.1)


def test_brute_force_integrator_stays_put(integrator):
    assert brute_force_value(integrator, np.zeros(1), 1.0, 2, 3) == pytest.approx(1.0)


def test_brute_force_double_integrator_full_braking(double_integrator):
    value = brute_force_value(double_integrator, np.array([1.0, -1.0]), 2.0, 4, 3)
    assert value == pytest.approx(0.5, abs=1e-9)


def test_brute_force_inside_obstacle(point_mass):
    value = brute_force_value(point_mass, np.zeros(4), 0.5, 2, 2)
    assert value == pytest.approx(-0.25)


def test_brute_force_refuses_huge_enumeration(integrator):
    with pytest.raises(RefusalError):
        brute_force_value(integrator, np.zeros(1), 1.0, 8, 10)


@pytest.fixture(scope='module')
def fine_double_integrator_solution():
    system = DoubleIntegrator1D(ControlBox([-1.0], [1.0]), goal=[2.0],
                                grid_axes=[AxisSpec(-1.0, 3.0, 101), AxisSpec(-2.0, 2.0, 101)])
    return system, solve_converged(system)


@pytest.mark.slow
def test_double_integrator_fine_grid_matches_analytic(fine_double_integrator_solution):
    system, value_fn = fine_double_integrator_solution
    nodes = value_fn.field.node_points()
    error = np.max(np.abs(value_fn.field.flat_values - system.analytic_value(nodes)))
    assert value_fn.provenance['converged']
    assert error <= 5 * 0.04
    assert value_fn.provenance['wall_time_s'] < 60.0


def _interior_error(system, value_fn):
    nodes = value_fn.field.node_points()
    interior = (nodes[:, 0] >= -0.5) & (nodes[:, 0] <= 2.5) & (np.abs(nodes[:, 1]) <= 1.5)
    return np.max(np.abs(value_fn.field.flat_values - system.analytic_value(nodes))[interior])


@pytest.mark.slow
def test_double_integrator_error_shrinks_with_refinement(double_integrator_solution,
                                                         fine_double_integrator_solution):
    coarse = _interior_error(*double_integrator_solution)
    fine = _interior_error(*fine_double_integrator_solution)
    assert coarse >= 1.5 * fine


def _sample_unsafe(value_fn, threshold, n, rng):
    field = value_fn.field
    points = rng.uniform(field.lower, field.upper, size=(50 * n, field.ndim))
    points = points[np.asarray(value_fn.interpolate(points)) <= threshold]
    return points[:n]


@pytest.mark.slow
def test_states_outside_safe_set_cannot_stay_safe(integrator_solution, double_integrator_solution):
    rng = np.random.default_rng(2024)
    for system, value_fn in (integrator_solution, double_integrator_solution):
        threshold = -2.0 * np.max(value_fn.field.spacing)
        states = _sample_unsafe(value_fn, threshold, 200, rng)
        assert len(states) == 200
        values = np.array([brute_force_value(system, x, 3.0, 6, 3) for x in states])
        assert np.mean(values < 0.0) >= 0.98


@pytest.mark.slow
def test_safe_policy_keeps_point_mass_invariant():
    system = PointMass2D(ControlBox([-1.0, -1.0], [1.0, 1.0]), goal=[1.0, 0.0], obstacle=Obstacle([0.0, 0.0], 0.25),
                         grid_axes=[AxisSpec(-1.5, 1.5, 21), AxisSpec(-1.5, 1.5, 21),
                                    AxisSpec(-1.0, 1.0, 21), AxisSpec(-1.0, 1.0, 21)])
    value_fn = solve_converged(system)
    margin = 2.0 * np.max(value_fn.field.spacing)
    starts = sample_initial_states(system, value_fn, 200, seed=11, margin=margin)
    safe = [safe_policy_rollout(system, value_fn, x0, 10.0, 0.02).info['min_l'] >= 0.0 for x0 in starts]
    assert np.mean(safe) >= 0.99
