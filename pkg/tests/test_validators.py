import copy
import glob
import os

import pytest

from config import resolve_workers
from systems.loader import build_system, load_system
from tests.conftest import REPO_ROOT
from tests.test_bench import SYSTEM_CONFIG
from utils.errors import ConfigurationError
from utils.validators import validate_axis_data, validate_suite_config, validate_system_config


@pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(REPO_ROOT, 'data', 'systems', '*.json'))))
def test_shipped_system_configs_load(path):
    system = load_system(path)
    assert len(system.grid_axes) == system.n_x
    assert system.goal is not None


def test_dubins_heading_axis_is_periodic():
    system = load_system(os.path.join(REPO_ROOT, 'data', 'systems', 'dubins_car.json'))
    assert system.grid_axes[2].periodic


def test_axis_validation():
    assert validate_axis_data({"min": 0, "max": 1, "n": 3}) == (True, None)
    assert not validate_axis_data({"min": 1, "max": 0, "n": 3})[0]
    assert not validate_axis_data({"min": 0, "max": 1, "n": 1})[0]
    assert not validate_axis_data({"min": 0, "max": 1})[0]


def test_unknown_system_is_rejected():
    data = dict(SYSTEM_CONFIG, system='rocket')
    assert not validate_system_config(data)[0]


def test_obstacle_required_for_point_mass():
    data = {
        "system": "point_mass_2d",
        "params": {"u_lower": [-1.0, -1.0], "u_upper": [1.0, 1.0]},
        "goal": [1.0, 0.0],
        "grid": {"axes": [{"min": -1, "max": 1, "n": 5}] * 4},
    }
    assert not validate_system_config(data)[0]
    data["obstacle"] = {"center": [0.0, 0.0], "radius": 0.25}
    assert validate_system_config(data) == (True, None)


def test_wrong_axis_count_is_rejected():
    data = copy.deepcopy(SYSTEM_CONFIG)
    data["grid"]["axes"] = data["grid"]["axes"][:1]
    with pytest.raises(ConfigurationError):
        build_system(data)


def test_suite_validation():
    suite = {"systems": [{"config": "a.json", "value_function": "a.bin"}], "horizons": [6, 8]}
    assert validate_suite_config(suite) == (True, None)
    assert not validate_suite_config(dict(suite, methods=['magic']))[0]
    assert not validate_suite_config({"systems": [{"config": "a.json"}], "methods": ["svmpc"]})[0]
    assert not validate_suite_config(dict(suite, task_seconds=0.1))[0]
    assert not validate_suite_config(dict(suite, horizons=[]))[0]


@pytest.mark.parametrize('key', ['trust_region', 'slack_penalty'])
def test_suite_rejects_non_positive_scp_settings(key):
    suite = {"systems": [{"config": "a.json", "value_function": "a.bin"}], "horizons": [6]}
    assert validate_suite_config(dict(suite, **{key: 0.5}))[0]
    assert not validate_suite_config(dict(suite, **{key: 0.0}))[0]
    entry_override = {"systems": [{"config": "a.json", "value_function": "a.bin", key: -1.0}], "horizons": [6]}
    assert not validate_suite_config(entry_override)[0]


def test_suite_rejects_bad_scp_iteration_cap():
    suite = {"systems": [{"config": "a.json", "value_function": "a.bin"}], "horizons": [6]}
    assert not validate_suite_config(dict(suite, max_scp_iters=0))[0]
    assert not validate_suite_config({"systems": [{"config": "a.json", "value_function": "a.bin",
                                                   "max_scp_iters": 2.5}], "horizons": [6]})[0]


def test_workers_environment_overrides_flag(monkeypatch):
    monkeypatch.delenv('SAFETY_HORIZON_WORKERS', raising=False)
    assert resolve_workers(3) == 3
    assert resolve_workers(None) == 1
    monkeypatch.setenv('SAFETY_HORIZON_WORKERS', '5')
    assert resolve_workers(3) == 5
