"""
Стенд замкнутых испытаний: выборка начальных состояний, прогон испытаний, запуск набора
(system x method x h x trial) в пуле процессов, CSV-отчеты, манифест и журнал в базе.
"""

import hashlib
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from grid.storage import read_field, write_field
from services.filter_service import FilterConfig, filter_control
from services.mpc_service import MpcConfig, MpcController, SafetyValueTerminal
from services.reachability_service import ValueFunction
from services.stats_service import (
    classify_failure,
    compute_metrics,
    summaries_to_frame,
    trial_step_means,
)
from systems.base import ControlAffineSystem
from systems.loader import load_system
from utils.errors import ConfigurationError, ContractViolationError, IntegrationError
from utils.validators import VALID_METHODS, validate_suite_config

logger = logging.getLogger(__name__)

SAMPLE_BATCH = 10_000
MAX_PROPOSALS = 1_000_000
MIN_ACCEPTANCE = 0.01


# ---------------------------
# Функции ценности на диске
# ---------------------------

def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + '.json'


def save_value_function(value_fn: ValueFunction, path: str) -> str:
    """Запись поля в бинарный формат и отчета о сходимости в <path>.json; возвращает путь отчета"""
    write_field(path, value_fn.field, value_fn.system_name)
    report = dict(value_fn.provenance)
    report['system'] = value_fn.system_name
    report['epsilon_default'] = value_fn.epsilon_default
    sidecar = _sidecar_path(path)
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2, ensure_ascii=False)
    return sidecar


def load_value_function(path: str) -> ValueFunction:
    """Чтение функции ценности; отчет о сходимости необязателен"""
    field_, system_name = read_field(path)
    provenance: Dict[str, Any] = {}
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar, 'r', encoding='utf-8') as f:
            provenance = json.load(f)
    epsilon = float(provenance.get('epsilon_default', 0.05))
    return ValueFunction(field_, system_name, epsilon, provenance)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------
# Конфигурация и результат испытания
# ---------------------------

@dataclass(frozen=True)
class TrialConfig:
    system_config: str
    method: str
    h: int
    task_seconds: float = 15.0
    dt: float = 0.04
    seed: int = 0
    value_function: Optional[str] = None
    epsilon: float = 0.05
    gamma: float = 1.0
    control_horizon: int = 1
    max_scp_iters: int = 15
    trust_region: float = 0.5
    slack_penalty: float = 100.0

    def __post_init__(self):
        if self.method not in VALID_METHODS:
            raise ContractViolationError(f"Unknown method {self.method}, expected one of {VALID_METHODS}")
        if self.task_seconds < self.h * self.dt - 1e-12:
            raise ContractViolationError(
                f"Task horizon {self.task_seconds} s is shorter than the planning horizon {self.h * self.dt} s")

    @property
    def n_steps(self) -> int:
        return int(round(self.task_seconds / self.dt))

    def mpc_config(self, value_fn: Optional[ValueFunction]) -> MpcConfig:
        terminal = None
        if self.method == 'svmpc':
            terminal = SafetyValueTerminal(value_fn, self.epsilon)
        return MpcConfig(
            h=self.h,
            dt=self.dt,
            control_horizon=self.control_horizon,
            max_scp_iters=self.max_scp_iters,
            trust_region=self.trust_region,
            slack_penalty=self.slack_penalty,
            terminal=terminal,
        )


@dataclass
class TrialResult:
    system: str
    method: str
    horizon: int
    trial_index: int
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    constraint_values: np.ndarray
    steps: List[Dict[str, Any]] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def safe(self) -> bool:
        """Безопасно, если l >= 0 во всех пройденных состояниях и испытание не прервано"""
        if self.error is not None or self.constraint_values.size == 0:
            return False
        return bool(np.min(self.constraint_values) >= 0.0)

    @property
    def failed_steps(self) -> int:
        return int(sum(1 for s in self.steps if s.get('failed') is True))

    @property
    def clamped_steps(self) -> int:
        return int(sum(1 for s in self.steps if s.get('clamped')))

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps)

    def to_csv(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.step_frame().to_csv(path, index=False)


# ---------------------------
# Начальные состояния
# ---------------------------

def default_margin(value_fn: ValueFunction, epsilon: float) -> float:
    """eps + 2 max dx: начальное состояние заведомо внутри безопасного множества"""
    return float(epsilon + 2.0 * np.max(value_fn.field.spacing))


def sample_initial_states(system: ControlAffineSystem, value_fn: Optional[ValueFunction], n: int, seed: int,
                          margin: Optional[float] = None, epsilon: float = 0.05) -> List[np.ndarray]:
    """
    Равномерная выборка с отклонением по области сетки: принимаются состояния с V(x) >= margin.

    Без функции ценности критерием служит l(x) >= margin по осям сетки системы.

    Raises:
        ConfigurationError: доля принятых состояний < 1% после 10^6 предложений
    """
    if margin is None:
        margin = default_margin(value_fn, epsilon) if value_fn is not None else 0.0
    if margin < 0:
        raise ContractViolationError(f"margin must be non-negative, got {margin}")
    if n <= 0:
        return []

    if value_fn is not None:
        lower, upper = value_fn.field.lower, value_fn.field.upper
        score = value_fn.interpolate
    else:
        lower = np.array([a.min for a in system.grid_axes])
        upper = np.array([a.max for a in system.grid_axes])
        score = system.constraint_l

    rng = np.random.default_rng(seed)
    accepted: List[np.ndarray] = []
    proposals = 0
    while len(accepted) < n:
        batch = rng.uniform(lower, upper, size=(SAMPLE_BATCH, lower.size))
        proposals += SAMPLE_BATCH
        keep = batch[np.asarray(score(batch)) >= margin]
        accepted.extend(keep)
        if len(accepted) < n and proposals >= MAX_PROPOSALS:
            rate = len(accepted) / proposals
            if rate < MIN_ACCEPTANCE:
                raise ConfigurationError(
                    f"Initial state sampling accepted {rate:.4%} of {proposals} proposals with margin {margin:.4f}")
    return [np.array(x) for x in accepted[:n]]


# ---------------------------
# Испытание
# ---------------------------

def run_trial(config: TrialConfig, x0: np.ndarray, trial_index: int = 0,
              system: Optional[ControlAffineSystem] = None,
              value_fn: Optional[ValueFunction] = None) -> TrialResult:
    """
    Замкнутый прогон длительностью task_seconds.

    Для метода filter номинальным регулятором служит vanilla MPC с тем же горизонтом.
    Неудачный шаг планирования помечается, применяются лучшие найденные управления.
    """
    system = system or load_system(config.system_config)
    if value_fn is None and config.value_function:
        value_fn = load_value_function(config.value_function)
    if config.method in ('svmpc', 'filter') and value_fn is None:
        raise ConfigurationError(f"Method {config.method} requires a value function")

    mpc_config = config.mpc_config(value_fn)
    controller = MpcController(system, mpc_config)
    safety_filter = FilterConfig(value_fn, config.gamma) if config.method == 'filter' else None

    x = system._check_state(np.asarray(x0, dtype=float))
    n_steps = config.n_steps
    states = [x]
    controls = []
    steps: List[Dict[str, Any]] = []
    error = None
    k = 0

    logger.info(f"Trial {trial_index}: {system.name}/{config.method}/h={config.h} from {x.tolist()}")
    try:
        while k < n_steps:
            plan, diagnostics = controller.step(x)
            for j in range(min(len(plan), n_steps - k)):
                u = plan[j]
                record = _step_record(system, value_fn, k, config.dt, x)
                if j == 0:
                    record.update({
                        'scp_iters': diagnostics['iterations'],
                        'plan_ms': diagnostics['plan_ms'],
                        'converged': diagnostics['converged'],
                        'failed': diagnostics['failed'],
                        'max_violation': diagnostics['max_violation'],
                        'terminal_residual': diagnostics['terminal_residual'],
                    })
                if safety_filter is not None:
                    u, filter_info = filter_control(system, safety_filter, x, u)
                    record['fallback'] = filter_info['fallback']
                record.update({f"u{i}": float(v) for i, v in enumerate(u)})
                record['active_ctrl'] = system.active_control_constraints(u)
                steps.append(record)

                x = system.step(x, u, config.dt)
                controls.append(np.array(u, dtype=float))
                states.append(x)
                k += 1
    except IntegrationError as e:
        error = str(e)
        logger.warning(f"Trial {trial_index} ({system.name}/{config.method}/h={config.h}) aborted: {e}")

    states_arr = np.array(states)
    result = TrialResult(
        system=system.name,
        method=config.method,
        horizon=config.h,
        trial_index=trial_index,
        x0=np.asarray(x0, dtype=float),
        times=np.arange(len(states)) * config.dt,
        states=states_arr,
        controls=np.array(controls).reshape(len(controls), system.n_u),
        constraint_values=np.asarray(system.constraint_l(states_arr)),
        steps=_complete_columns(steps, system),
        error=error,
    )
    tag = f"Trial {trial_index} ({system.name}/{config.method}/h={config.h})"
    if result.clamped_steps:
        logger.warning(f"{tag}: {result.clamped_steps} step(s) queried the value function outside its grid")
    logger.info(f"{tag} finished: {len(controls)}/{n_steps} steps, safe={result.safe}, "
                f"failed planning steps={result.failed_steps}")
    return result


def _step_record(system: ControlAffineSystem, value_fn: Optional[ValueFunction], k: int, dt: float,
                 x: np.ndarray) -> Dict[str, Any]:
    record: Dict[str, Any] = {'t': k * dt, 'step': k}
    record.update({f"x{i}": float(v) for i, v in enumerate(x)})
    record['l'] = float(system.constraint_l(x))
    record['V'] = float(value_fn.interpolate(x)) if value_fn is not None else float('nan')
    record['clamped'] = bool(value_fn.is_clamped(x)) if value_fn is not None else False
    record['dist_goal'] = float(system.distance_to_goal(x)) if system.goal is not None else float('nan')
    return record


def _complete_columns(steps: List[Dict[str, Any]], system: ControlAffineSystem) -> List[Dict[str, Any]]:
    """Единый набор и порядок столбцов пошаговой таблицы"""
    columns = (['t', 'step'] + [f"x{i}" for i in range(system.n_x)] + [f"u{i}" for i in range(system.n_u)]
               + ['l', 'V', 'dist_goal', 'active_ctrl', 'clamped', 'scp_iters', 'plan_ms', 'converged',
                  'failed', 'fallback', 'max_violation', 'terminal_residual'])
    defaults = {'fallback': False}
    return [{c: s.get(c, defaults.get(c, float('nan') if c not in ('converged', 'failed') else None))
             for c in columns} for s in steps]


# ---------------------------
# Набор испытаний
# ---------------------------

# Кэш систем и функций ценности внутри процесса-воркера
_worker_cache: Dict[str, Any] = {}


def _cached(kind: str, path: str):
    key = f"{kind}:{path}"
    if key not in _worker_cache:
        _worker_cache[key] = load_system(path) if kind == 'system' else load_value_function(path)
    return _worker_cache[key]


def _run_trial_job(job: Dict[str, Any]) -> TrialResult:
    """Одна задача пула: испытание + CSV; исключения превращаются в запись об ошибке"""
    config: TrialConfig = job['config']
    try:
        system = _cached('system', config.system_config)
        value_fn = _cached('value', config.value_function) if config.value_function else None
        result = run_trial(config, job['x0'], job['trial_index'], system, value_fn)
    except Exception as e:
        logger.error(f"Trial {job['trial_index']} ({config.method}/h={config.h}) failed: {e}")
        logger.error(traceback.format_exc())
        x0 = np.asarray(job['x0'], dtype=float)
        result = TrialResult(
            system=job['system_name'], method=config.method, horizon=config.h, trial_index=job['trial_index'],
            x0=x0, times=np.zeros(0), states=np.zeros((0, x0.size)), controls=np.zeros((0, 0)),
            constraint_values=np.zeros(0), steps=[], error=str(e),
        )
    result.to_csv(job['csv_path'])
    return result


def load_suite(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigurationError(f"Suite config not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}")
    is_valid, error = validate_suite_config(data)
    if not is_valid:
        raise ConfigurationError(f"{path}: {error}")
    return data


def _trial_csv_path(out_dir: str, system: str, method: str, h: int, index: int) -> str:
    return os.path.join(out_dir, 'trials', system, method, f"h{h}", f"trial_{index:03d}.csv")


def _build_jobs(suite: Dict[str, Any], out_dir: str) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    """Задачи пула и раздел манифеста по системам; x0 общие для всех методов и горизонтов"""
    seed = int(suite.get('seed', 0))
    n_trials = int(suite.get('n_trials', 100))
    methods = suite.get('methods', VALID_METHODS)
    horizons = suite.get('horizons', [6, 8, 10, 12, 15])
    epsilon = float(suite.get('epsilon', 0.05))

    jobs = []
    systems_manifest = {}
    for entry in suite['systems']:
        system = load_system(entry['config'])
        vf_path = entry.get('value_function')
        value_fn = load_value_function(vf_path) if vf_path else None
        x0s = sample_initial_states(system, value_fn, n_trials, seed, entry.get('margin'), epsilon)

        systems_manifest[system.name] = {
            'config': entry['config'],
            'config_sha256': file_sha256(entry['config']),
            'value_function': vf_path,
            'value_function_sha256': file_sha256(vf_path) if vf_path else None,
            'x0': [x.tolist() for x in x0s],
        }

        for method in methods:
            for h in horizons:
                config = TrialConfig(
                    system_config=entry['config'],
                    method=method,
                    h=int(h),
                    task_seconds=float(suite.get('task_seconds', 15.0)),
                    dt=float(suite.get('dt', 0.04)),
                    seed=seed,
                    value_function=vf_path,
                    epsilon=epsilon,
                    gamma=float(suite.get('gamma', 1.0)),
                    control_horizon=int(suite.get('control_horizon', 1)),
                    max_scp_iters=int(entry.get('max_scp_iters', suite.get('max_scp_iters', 15))),
                    trust_region=float(entry.get('trust_region', suite.get('trust_region', 0.5))),
                    slack_penalty=float(entry.get('slack_penalty', suite.get('slack_penalty', 100.0))),
                )
                for index, x0 in enumerate(x0s):
                    jobs.append({
                        'config': config,
                        'x0': x0,
                        'trial_index': index,
                        'system_name': system.name,
                        'csv_path': _trial_csv_path(out_dir, system.name, method, int(h), index),
                    })
    return jobs, systems_manifest


def run_benchmark(suite: Dict[str, Any], out_dir: str, workers: int = 1,
                  ledger_url: Optional[str] = None, use_ledger: bool = True) -> Dict[str, Any]:
    """
    Прогон набора испытаний и запись отчетов.

    Args:
        suite: Проверенная конфигурация набора (см. validate_suite_config)
        out_dir: Директория результатов
        workers: Число процессов пула
        ledger_url: URL журнала результатов (по умолчанию из config)
        use_ledger: Записывать ли испытания в базу

    Returns:
        Dict: {"success", "message", "summary_path", "manifest_path", "n_trials", "n_errors"}
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        jobs, systems_manifest = _build_jobs(suite, out_dir)
        logger.info(f"Benchmark: {len(jobs)} trials on {workers} worker(s), output {out_dir}")

        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_trial_job, jobs, chunksize=1))
        else:
            results = [_run_trial_job(job) for job in jobs]

        # Группировка по (system, method, h) в порядке задач, независимо от порядка выполнения
        groups: Dict[Tuple[str, str, int], List[TrialResult]] = {}
        for result in results:
            groups.setdefault((result.system, result.method, result.horizon), []).append(result)
        summaries = [compute_metrics(sorted(group, key=lambda r: r.trial_index)) for group in groups.values()]

        summary_frame = summaries_to_frame(summaries)
        summary_path = os.path.join(out_dir, 'summary.csv')
        summary_frame.to_csv(summary_path, index=False)

        manifest = {
            'created_at': datetime.now(timezone.utc).isoformat(),
            'suite': suite,
            'workers': workers,
            'systems': systems_manifest,
            'trials': [{
                'system': job['system_name'],
                'method': job['config'].method,
                'h': job['config'].h,
                'trial_index': job['trial_index'],
                'csv': os.path.relpath(job['csv_path'], out_dir),
                'csv_sha256': file_sha256(job['csv_path']),
                'config': asdict(job['config']),
            } for job in jobs],
        }
        manifest_path = os.path.join(out_dir, 'manifest.json')
        with open(manifest_path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)

        n_errors = sum(1 for r in results if r.error is not None)
        if use_ledger:
            _record_ledger(suite, out_dir, workers, results, jobs, file_sha256(manifest_path), ledger_url)

        if n_errors:
            logger.warning(f"Benchmark finished with {n_errors} aborted trial(s)")
        logger.info(f"Summary written to {summary_path}")
        return {
            "success": True,
            "message": f"Выполнено {len(results)} испытаний, строк сводки: {len(summary_frame)}",
            "summary_path": summary_path,
            "manifest_path": manifest_path,
            "n_trials": len(results),
            "n_errors": n_errors,
            "summary": summary_frame,
        }
    except Exception as e:
        logger.error(f"Ошибка при выполнении бенчмарка: {e}")
        logger.error(traceback.format_exc())
        return {"success": False, "message": f"Ошибка при выполнении бенчмарка: {e}"}


def _record_ledger(suite: Dict[str, Any], out_dir: str, workers: int, results: Sequence[TrialResult],
                   jobs: Sequence[Dict[str, Any]], manifest_hash: str, url: Optional[str]):
    """Запись прогона в журнал результатов; сбой журнала не прерывает бенчмарк"""
    from database.db_manager import get_session, init_db
    from database.models import BenchmarkRun, TrialRecord

    try:
        init_db(url)
        with get_session(url) as session:
            run = BenchmarkRun(
                suite_name=str(suite.get('name', 'suite')),
                out_dir=os.path.abspath(out_dir),
                seed=int(suite.get('seed', 0)),
                n_trials=int(suite.get('n_trials', 100)),
                workers=workers,
                manifest_sha256=manifest_hash,
                status='partial' if any(r.error for r in results) else 'completed',
                finished_at=datetime.now(timezone.utc),
            )
            session.add(run)
            for result, job in zip(results, jobs):
                means = trial_step_means(result)
                run.trials.append(TrialRecord(
                    system=result.system,
                    method=result.method,
                    horizon=result.horizon,
                    trial_index=result.trial_index,
                    safe=result.safe,
                    n_steps=len(result.steps),
                    failed_steps=result.failed_steps,
                    clamped_steps=result.clamped_steps,
                    failure_cause=classify_failure(result),
                    error=result.error,
                    csv_path=job['csv_path'],
                    **{metric: (None if math.isnan(value) else value) for metric, value in means.items()},
                ))
        logger.info(f"Benchmark run recorded in the results ledger ({len(results)} trials)")
    except Exception as e:
        logger.error(f"Ошибка при записи в журнал результатов: {e}")
        logger.error(traceback.format_exc())
