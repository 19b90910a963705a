import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from services.filter_service import FilterConfig, filter_control
from utils.errors import ContractViolationError


def test_safe_nominal_control_is_returned_unchanged(integrator, integrator_value):
    u_nom = np.array([-0.3])
    u, info = filter_control(integrator, FilterConfig(integrator_value), np.array([0.5]), u_nom)
    assert_array_equal(u, u_nom)
    assert not info['modified'] and not info['fallback']


def test_unsafe_nominal_control_is_projected(integrator, integrator_value):
    u, info = filter_control(integrator, FilterConfig(integrator_value), np.array([0.5]), np.array([0.9]))
    assert info['modified']
    assert_allclose(u, [0.5], atol=1e-6)


def test_filter_is_minimal_modification(integrator, integrator_value, rng):
    config = FilterConfig(integrator_value)
    for u_nom in rng.uniform(-1.0, 1.0, size=20):
        u, _ = filter_control(integrator, config, np.array([0.5]), np.array([u_nom]))
        assert u[0] == pytest.approx(min(u_nom, 0.5), abs=1e-6)


def test_unreachable_condition_falls_back_to_safe_control(integrator, integrator_value):
    u, info = filter_control(integrator, FilterConfig(integrator_value, gamma=5.0), np.array([1.5]), np.array([1.0]))
    assert info['fallback']
    assert_allclose(u, [-1.0])


def test_flat_gradient_keeps_nominal(integrator, integrator_value):
    u, info = filter_control(integrator, FilterConfig(integrator_value), np.zeros(1), np.array([0.7]))
    assert_allclose(u, [0.7])
    assert not info['modified']


def test_gamma_must_be_positive(integrator_value):
    with pytest.raises(ContractViolationError):
        FilterConfig(integrator_value, gamma=0.0)


def test_filtered_closed_loop_stays_safe(integrator, integrator_value, rng):
    config = FilterConfig(integrator_value)
    dt = 0.04
    safe = []
    for _ in range(100):
        x = rng.uniform(-0.9, 0.9, size=1)
        u_nom = np.array([rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)])
        min_l = float(integrator.constraint_l(x))
        for _ in range(200):
            u, _ = filter_control(integrator, config, x, u_nom)
            x = integrator.step(x, u, dt)
            min_l = min(min_l, float(integrator.constraint_l(x)))
        safe.append(min_l >= 0.0)
    assert np.mean(safe) >= 0.95
