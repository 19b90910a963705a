import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from grid.field import AxisSpec, GridField  # noqa: E402
from services.reachability_service import ValueFunction  # noqa: E402
from systems.base import ControlBox, CostWeights, Obstacle  # noqa: E402
from systems.benchmarks import DoubleIntegrator1D, Integrator1D, PointMass2D, TwoLinkArm  # noqa: E402

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def integrator():
    return Integrator1D(ControlBox([-1.0], [1.0]), goal=[0.5],
                        grid_axes=[AxisSpec(-2.0, 2.0, 41)])


@pytest.fixture
def double_integrator():
    return DoubleIntegrator1D(ControlBox([-1.0], [1.0]), goal=[2.0],
                              grid_axes=[AxisSpec(-1.0, 3.0, 51), AxisSpec(-2.0, 2.0, 51)])


@pytest.fixture
def point_mass():
    return PointMass2D(ControlBox([-1.0, -1.0], [1.0, 1.0]), goal=[1.0, 0.0],
                       obstacle=Obstacle([0.0, 0.0], 0.25),
                       grid_axes=[AxisSpec(-1.5, 1.5, 9), AxisSpec(-1.5, 1.5, 9),
                                  AxisSpec(-1.0, 1.0, 9), AxisSpec(-1.0, 1.0, 9)])


@pytest.fixture
def arm():
    return TwoLinkArm(ControlBox([-35.0, -15.0], [35.0, 15.0]), goal=[1.5, 0.5],
                      obstacle=Obstacle([1.0, -1.0], 0.3), weights=CostWeights(w_u=1e-4, w_v=1e-2),
                      grid_axes=[AxisSpec(-np.pi, np.pi, 25, periodic=True), AxisSpec(-np.pi, np.pi, 25, periodic=True),
                                 AxisSpec(-4.0, 4.0, 25), AxisSpec(-4.0, 4.0, 25)],
                      params={"payload": 0.5})


@pytest.fixture
def integrator_value():
    """Точная функция ценности интегратора V = 1 - |x| на мелкой сетке"""
    axes = [AxisSpec(-2.0, 2.0, 401)]
    field = GridField.from_function(axes, lambda x: 1.0 - np.abs(x[:, 0]))
    return ValueFunction(field, "integrator_1d")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
