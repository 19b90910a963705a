import json
import os

import pytest

from main import SafetyHorizonApp
from tests.test_bench import SYSTEM_CONFIG


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv('SAFETY_HORIZON_WORKERS', raising=False)
    config_path = tmp_path / 'double_integrator.json'
    config_path.write_text(json.dumps(SYSTEM_CONFIG), encoding='utf-8')
    return tmp_path, str(config_path)


def test_solve_value_writes_field_and_report(workspace):
    root, config_path = workspace
    out = str(root / 'vf' / 'di.bin')
    code = SafetyHorizonApp().run(['solve-value', '--system', config_path, '--out', out, '--epsilon', '0.1'])
    assert code == 0
    assert os.path.exists(out)
    with open(str(root / 'vf' / 'di.json'), encoding='utf-8') as f:
        report = json.load(f)
    assert report['epsilon_default'] == 0.1
    assert report['max_violation_of_upper_bound'] <= 1e-12


def test_run_bench_and_report(workspace):
    root, config_path = workspace
    app = SafetyHorizonApp()
    vf = str(root / 'di.bin')
    assert app.run(['solve-value', '--system', config_path, '--out', vf]) == 0

    trial_csv = str(root / 'trial.csv')
    code = app.run(['run', '--system', config_path, '--method', 'svmpc', '--vf', vf, '--x0', '1.0,0.0',
                    '--horizon', '6', '--task-seconds', '0.24', '--out', trial_csv])
    assert code == 0
    assert os.path.exists(trial_csv)

    suite = {
        "name": "cli", "seed": 1, "n_trials": 1, "task_seconds": 0.24, "dt": 0.04,
        "methods": ["vanilla", "svmpc"], "horizons": [5],
        "systems": [{"config": config_path, "value_function": vf}],
    }
    suite_path = root / 'suite.json'
    suite_path.write_text(json.dumps(suite), encoding='utf-8')
    out_dir = str(root / 'bench')
    assert app.run(['bench', '--config', str(suite_path), '--out', out_dir, '--no-ledger']) == 0
    assert os.path.exists(os.path.join(out_dir, 'summary.csv'))

    report_path = str(root / 'report.csv')
    assert app.run(['report', out_dir, '--out', report_path, '--normalized']) == 0
    assert os.path.exists(report_path)


def test_run_rejects_wrong_state_length(workspace):
    _, config_path = workspace
    code = SafetyHorizonApp().run(['run', '--system', config_path, '--method', 'vanilla', '--x0', '1,2,3',
                                   '--horizon', '6', '--task-seconds', '0.24'])
    assert code == 1


def test_report_without_inputs_fails(workspace):
    assert SafetyHorizonApp().run(['report']) == 1


def test_unknown_method_is_rejected_by_parser(workspace):
    _, config_path = workspace
    with pytest.raises(SystemExit):
        SafetyHorizonApp().run(['run', '--system', config_path, '--method', 'magic', '--x0', '0,0',
                                '--horizon', '6'])
