import json
import os

import numpy as np
import pandas as pd
import pytest

from services.bench_service import (
    TrialConfig,
    load_value_function,
    run_benchmark,
    run_trial,
    sample_initial_states,
    save_value_function,
)
from services.reachability_service import solve_converged
from services.stats_service import summary_from_ledger
from systems.loader import load_system
from utils.errors import ConfigurationError, ContractViolationError

SYSTEM_CONFIG = {
    "system": "double_integrator_1d",
    "params": {"u_lower": [-1.0], "u_upper": [1.0], "w_u": 0.01, "w_v": 0.01},
    "goal": [2.0],
    "grid": {"axes": [{"min": -1.0, "max": 3.0, "n": 21}, {"min": -2.0, "max": 2.0, "n": 21}]},
}


@pytest.fixture(scope='module')
def bench_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp('bench_inputs')
    config_path = str(root / 'double_integrator.json')
    with open(config_path, 'w', encoding='utf-8') as f:
        json.dump(SYSTEM_CONFIG, f)
    system = load_system(config_path)
    vf_path = str(root / 'double_integrator.bin')
    save_value_function(solve_converged(system), vf_path)
    return config_path, vf_path


def _suite(config_path, vf_path):
    return {
        "name": "tiny",
        "seed": 3,
        "n_trials": 2,
        "task_seconds": 0.32,
        "dt": 0.04,
        "methods": ["vanilla", "svmpc", "filter"],
        "horizons": [6],
        "systems": [{"config": config_path, "value_function": vf_path}],
    }


def _trial_frames(out_dir):
    frames = {}
    for root, _, files in os.walk(os.path.join(out_dir, 'trials')):
        for name in files:
            path = os.path.join(root, name)
            frames[os.path.relpath(path, out_dir)] = pd.read_csv(path).drop(columns=['plan_ms'])
    return frames


def test_value_function_round_trip(bench_inputs):
    _, vf_path = bench_inputs
    value_fn = load_value_function(vf_path)
    assert value_fn.system_name == 'double_integrator_1d'
    assert value_fn.field.shape == (21, 21)
    assert 'steps' in value_fn.provenance


def test_sampling_respects_margin(integrator, integrator_value):
    states = sample_initial_states(integrator, integrator_value, 50, seed=1, margin=0.5)
    assert len(states) == 50
    assert all(integrator_value.interpolate(x) >= 0.5 for x in states)


def test_sampling_is_reproducible(integrator, integrator_value):
    first = sample_initial_states(integrator, integrator_value, 10, seed=4)
    second = sample_initial_states(integrator, integrator_value, 10, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_sampling_zero_states(integrator, integrator_value):
    assert sample_initial_states(integrator, integrator_value, 0, seed=0) == []


def test_sampling_with_unreachable_margin_fails(integrator, integrator_value):
    with pytest.raises(ConfigurationError):
        sample_initial_states(integrator, integrator_value, 5, seed=0, margin=5.0)


def test_trial_config_rejects_short_task():
    with pytest.raises(ContractViolationError):
        TrialConfig(system_config='unused.json', method='vanilla', h=10, task_seconds=0.2)


def test_trial_at_goal_stays_safe(point_mass):
    config = TrialConfig(system_config='unused.json', method='vanilla', h=6, task_seconds=0.48)
    result = run_trial(config, np.array([1.0, 0.0, 0.0, 0.0]), system=point_mass)
    assert result.safe
    assert len(result.steps) == 12
    assert result.states.shape == (13, 4)
    assert result.step_frame()['dist_goal'].mean() <= 0.05


def test_full_control_horizon_plans_once(point_mass):
    config = TrialConfig(system_config='unused.json', method='vanilla', h=6, task_seconds=0.24,
                         control_horizon=6)
    result = run_trial(config, np.array([1.0, 0.0, 0.0, 0.0]), system=point_mass)
    frame = result.step_frame()
    assert len(frame) == 6
    assert frame['scp_iters'].notna().sum() == 1


def test_filter_needs_value_function(point_mass):
    config = TrialConfig(system_config='unused.json', method='filter', h=6, task_seconds=0.24)
    with pytest.raises(ConfigurationError):
        run_trial(config, np.array([1.0, 0.0, 0.0, 0.0]), system=point_mass)


def test_benchmark_outputs_and_ledger(bench_inputs, tmp_path):
    config_path, vf_path = bench_inputs
    ledger = f"sqlite:///{tmp_path / 'ledger.db'}"
    out_dir = str(tmp_path / 'run')
    result = run_benchmark(_suite(config_path, vf_path), out_dir, workers=1, ledger_url=ledger)

    assert result['success']
    assert result['n_trials'] == 6
    summary = pd.read_csv(result['summary_path'])
    assert sorted(summary['method']) == ['filter', 'svmpc', 'vanilla']
    assert (summary['n_trials'] == 2).all()

    with open(result['manifest_path'], encoding='utf-8') as f:
        manifest = json.load(f)
    assert len(manifest['systems']['double_integrator_1d']['x0']) == 2
    assert len(manifest['trials']) == 6
    assert len(_trial_frames(out_dir)) == 6

    # Все методы стартуют из одних и тех же состояний
    x0_by_method = {}
    for path, frame in _trial_frames(out_dir).items():
        method = path.split(os.sep)[2]
        x0_by_method.setdefault(method, set()).add((frame['x0'].iloc[0], frame['x1'].iloc[0]))
    assert x0_by_method['vanilla'] == x0_by_method['svmpc'] == x0_by_method['filter']

    from_ledger = summary_from_ledger(ledger).set_index('method')
    for _, row in summary.iterrows():
        assert from_ledger.loc[row['method'], 'safety_rate'] == pytest.approx(row['safety_rate'])


def test_benchmark_is_deterministic(bench_inputs, tmp_path):
    config_path, vf_path = bench_inputs
    suite = _suite(config_path, vf_path)
    run_benchmark(suite, str(tmp_path / 'a'), workers=1, use_ledger=False)
    run_benchmark(suite, str(tmp_path / 'b'), workers=1, use_ledger=False)
    first, second = _trial_frames(str(tmp_path / 'a')), _trial_frames(str(tmp_path / 'b'))
    assert first.keys() == second.keys()
    for key in first:
        pd.testing.assert_frame_equal(first[key], second[key])


def test_suite_scp_settings_reach_trials(bench_inputs, tmp_path):
    config_path, vf_path = bench_inputs
    suite = dict(_suite(config_path, vf_path), methods=['vanilla'], n_trials=1, trust_region=0.3,
                 max_scp_iters=8)
    suite['systems'] = [{"config": config_path, "value_function": vf_path, "slack_penalty": 50.0,
                         "max_scp_iters": 6}]
    result = run_benchmark(suite, str(tmp_path / 'run'), workers=1, use_ledger=False)
    assert result['success']
    with open(result['manifest_path'], encoding='utf-8') as f:
        trial = json.load(f)['trials'][0]['config']
    assert trial['trust_region'] == pytest.approx(0.3)
    assert trial['slack_penalty'] == pytest.approx(50.0)
    assert trial['max_scp_iters'] == 6
    mpc = TrialConfig(**trial).mpc_config(None)
    assert mpc.trust_region == pytest.approx(0.3)
    assert mpc.slack_penalty == pytest.approx(50.0)


@pytest.mark.slow
def test_worker_count_does_not_change_results(bench_inputs, tmp_path):
    config_path, vf_path = bench_inputs
    suite = _suite(config_path, vf_path)
    run_benchmark(suite, str(tmp_path / 'serial'), workers=1, use_ledger=False)
    run_benchmark(suite, str(tmp_path / 'parallel'), workers=2, use_ledger=False)
    serial, parallel = _trial_frames(str(tmp_path / 'serial')), _trial_frames(str(tmp_path / 'parallel'))
    assert serial.keys() == parallel.keys()
    for key in serial:
        pd.testing.assert_frame_equal(serial[key], parallel[key])
