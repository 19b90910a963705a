"""
Метрики замкнутых испытаний и сводные таблицы по методам и горизонтам.

Метрики, кроме доли безопасных испытаний, считаются только по безопасным испытаниям:
сначала среднее по шагам испытания, затем среднее и стандартное отклонение (ddof=0) по испытаниям.
"""

import logging
import os
import traceback
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.errors import ContractViolationError
from utils.formatters import METHOD_TITLES, METRIC_TITLES, format_metric_cell, format_table

if TYPE_CHECKING:
    from services.bench_service import TrialResult

logger = logging.getLogger(__name__)

# Метрики, усредняемые по шагам испытания (имя метрики -> столбец пошаговой таблицы)
STEP_METRICS = {
    'avg_dist_goal': 'dist_goal',
    'avg_dist_obs': 'l',
    'avg_active_ctrl': 'active_ctrl',
    'avg_scp_iters': 'scp_iters',
    'avg_plan_ms': 'plan_ms',
}

METRICS = ['safety_rate'] + list(STEP_METRICS)

# Для этих метрик лучше большее значение, для остальных - меньшее
HIGHER_IS_BETTER = {'safety_rate', 'avg_dist_obs'}

SUMMARY_COLUMNS = [
    'system', 'method', 'h', 'n_trials', 'safety_rate',
    'avg_dist_goal_mean', 'avg_dist_goal_std',
    'avg_dist_obs_mean', 'avg_dist_obs_std',
    'avg_active_ctrl_mean', 'avg_active_ctrl_std',
    'avg_scp_iters_mean', 'avg_scp_iters_std',
    'avg_plan_ms_mean', 'avg_plan_ms_std',
]

EXTRA_COLUMNS = ['n_safe', 'failures_terminal_first', 'failures_other', 'failed_steps']

# Невязка терминального ограничения, считающаяся нарушением
TERMINAL_RESIDUAL_TOL = 1e-4


@dataclass
class MetricsSummary:
    system: str
    method: str
    h: int
    n_trials: int
    n_safe: int
    safety_rate: float
    means: Dict[str, Optional[float]] = field(default_factory=dict)
    stds: Dict[str, Optional[float]] = field(default_factory=dict)
    failures_terminal_first: int = 0
    failures_other: int = 0
    failed_steps: int = 0

    def to_row(self) -> Dict[str, Any]:
        row = {
            'system': self.system,
            'method': self.method,
            'h': self.h,
            'n_trials': self.n_trials,
            'safety_rate': self.safety_rate,
        }
        for metric in STEP_METRICS:
            row[f"{metric}_mean"] = self.means.get(metric)
            row[f"{metric}_std"] = self.stds.get(metric)
        row['n_safe'] = self.n_safe
        row['failures_terminal_first'] = self.failures_terminal_first
        row['failures_other'] = self.failures_other
        row['failed_steps'] = self.failed_steps
        return row


def trial_step_means(trial: "TrialResult") -> Dict[str, float]:
    """Средние по шагам одного испытания"""
    frame = trial.step_frame()
    means = {}
    for metric, column in STEP_METRICS.items():
        values = frame[column].dropna() if column in frame else pd.Series(dtype=float)
        means[metric] = float(values.mean()) if len(values) else float('nan')
    return means


def classify_failure(trial: "TrialResult") -> Optional[str]:
    """
    Причина небезопасного испытания.

    Returns:
        Optional[str]: None для безопасного испытания;
            "terminal_before_state" - терминальное ограничение плана нарушено раньше первого нарушения l;
            "state_without_terminal" - план с терминальным ограничением, но оно выполнялось до нарушения l;
            "state_only" - метод без терминального ограничения
    """
    if trial.safe:
        return None
    if trial.method != 'svmpc':
        return 'state_only'

    frame = trial.step_frame()
    if frame.empty:
        return 'state_without_terminal'
    l_values = trial.constraint_values
    violated = np.flatnonzero(l_values < 0.0)
    first_violation = int(violated[0]) if violated.size else len(l_values)

    before = frame[frame['step'] < first_violation]
    residuals = before['terminal_residual'].dropna() if 'terminal_residual' in before else pd.Series(dtype=float)
    if (residuals > TERMINAL_RESIDUAL_TOL).any():
        return 'terminal_before_state'
    return 'state_without_terminal'


def compute_metrics(results: Sequence["TrialResult"]) -> MetricsSummary:
    """
    Сводка шести метрик по набору испытаний одного метода и горизонта.

    Raises:
        ContractViolationError: пустой список испытаний
    """
    if not results:
        raise ContractViolationError("compute_metrics requires at least one trial")

    first = results[0]
    rows = []
    failures = {'terminal_before_state': 0, 'other': 0}
    failed_steps = 0
    for trial in results:
        row = {'safe': bool(trial.safe)}
        row.update(trial_step_means(trial))
        rows.append(row)
        failed_steps += trial.failed_steps
        cause = classify_failure(trial)
        if cause == 'terminal_before_state':
            failures['terminal_before_state'] += 1
        elif cause is not None:
            failures['other'] += 1

    frame = pd.DataFrame(rows)
    safe = frame[frame['safe']]
    means: Dict[str, Optional[float]] = {}
    stds: Dict[str, Optional[float]] = {}
    for metric in STEP_METRICS:
        values = safe[metric].dropna()
        if len(values) == 0:
            # Нет безопасных испытаний: метрика отсутствует, а не равна нулю
            means[metric] = None
            stds[metric] = None
        else:
            means[metric] = float(values.mean())
            stds[metric] = float(values.std(ddof=0))

    return MetricsSummary(
        system=first.system,
        method=first.method,
        h=first.horizon,
        n_trials=len(results),
        n_safe=int(len(safe)),
        safety_rate=float(frame['safe'].mean()),
        means=means,
        stds=stds,
        failures_terminal_first=failures['terminal_before_state'],
        failures_other=failures['other'],
        failed_steps=failed_steps,
    )


def summaries_to_frame(summaries: Sequence[MetricsSummary]) -> pd.DataFrame:
    frame = pd.DataFrame([s.to_row() for s in summaries])
    if frame.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS + EXTRA_COLUMNS)
    return frame[SUMMARY_COLUMNS + EXTRA_COLUMNS]


def load_summaries(paths: Sequence[str]) -> pd.DataFrame:
    """Чтение одного или нескольких summary.csv (путь к файлу или к директории бенчмарка)"""
    frames = []
    for path in paths:
        if os.path.isdir(path):
            path = os.path.join(path, 'summary.csv')
        frames.append(pd.read_csv(path))
    if not frames:
        raise ContractViolationError("report requires at least one summary")
    return pd.concat(frames, ignore_index=True)


def best_methods(summary: pd.DataFrame) -> pd.DataFrame:
    """
    Флаги лучшего метода по каждой метрике внутри группы (system, h).

    Returns:
        pd.DataFrame: Столбцы best_<metric> (bool), индекс совпадает с summary
    """
    flags = pd.DataFrame(index=summary.index)
    for metric in METRICS:
        column = metric if metric == 'safety_rate' else f"{metric}_mean"
        values = pd.to_numeric(summary[column], errors='coerce')
        grouped = values.groupby([summary['system'], summary['h']])
        target = grouped.transform('max') if metric in HIGHER_IS_BETTER else grouped.transform('min')
        flags[f"best_{metric}"] = values.notna() & np.isclose(values, target, rtol=0.0, atol=1e-12)
    return flags


def normalized_metrics(summary: pd.DataFrame) -> pd.DataFrame:
    """
    Нормировка шести метрик в [0, 1] внутри каждой группы (system, h), 1 - лучший метод.

    При совпадении значений всех методов ставится 1.
    """
    result = summary[['system', 'method', 'h']].copy()
    for metric in METRICS:
        column = metric if metric == 'safety_rate' else f"{metric}_mean"
        values = pd.to_numeric(summary[column], errors='coerce')
        grouped = values.groupby([summary['system'], summary['h']])
        low = grouped.transform('min')
        high = grouped.transform('max')
        span = high - low
        if metric in HIGHER_IS_BETTER:
            score = (values - low) / span
        else:
            score = (high - values) / span
        result[metric] = score.where(span > 0, 1.0).where(values.notna())
    return result


def build_report(summary: pd.DataFrame) -> Dict[str, Any]:
    """
    Таблица сравнения в формате ячеек mean±std с отметкой лучшего метода ('*')

    Returns:
        Dict: {"text": str, "table": pd.DataFrame}
    """
    summary = summary.sort_values(['system', 'h', 'method']).reset_index(drop=True)
    flags = best_methods(summary)
    records = []
    text_rows = []
    for idx, row in summary.iterrows():
        record = {
            'system': row['system'],
            'h': int(row['h']),
            'method': row['method'],
        }
        text_row = [str(row['system']), str(int(row['h'])), METHOD_TITLES.get(row['method'], row['method'])]
        for metric in METRICS:
            cell = format_metric_cell(row.to_dict(), metric)
            record[metric] = cell
            record[f"best_{metric}"] = bool(flags.loc[idx, f"best_{metric}"])
            text_row.append(cell + ('*' if record[f"best_{metric}"] else ''))
        records.append(record)
        text_rows.append(text_row)

    headers = ['System', 'h', 'Method'] + [METRIC_TITLES[m] for m in METRICS]
    return {"text": format_table(headers, text_rows), "table": pd.DataFrame(records)}


def write_report(summary_paths: Sequence[str], out_path: Optional[str] = None,
                 normalized: bool = False) -> Dict[str, Any]:
    """Отчет по сохраненным сводкам; результат в формате {"success", "message", ...}"""
    try:
        summary = load_summaries(summary_paths)
        report = build_report(summary)
        result = {"success": True, "text": report["text"], "table": report["table"]}
        if out_path:
            os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
            report["table"].to_csv(out_path, index=False)
            result["report_path"] = out_path
        if normalized:
            norm = normalized_metrics(summary)
            result["normalized"] = norm
            if out_path:
                norm_path = os.path.splitext(out_path)[0] + '_normalized.csv'
                norm.to_csv(norm_path, index=False)
                result["normalized_path"] = norm_path
        result["message"] = f"Отчет построен по {len(summary)} строкам сводки"
        return result
    except Exception as e:
        logger.error(f"Ошибка при построении отчета: {e}")
        logger.error(traceback.format_exc())
        return {"success": False, "message": f"Ошибка при построении отчета: {e}"}


def summary_from_ledger(url: Optional[str] = None, run_id: Optional[int] = None) -> pd.DataFrame:
    """Восстановление сводки по журналу результатов в базе данных"""
    from database.db_manager import get_session
    from database.models import BenchmarkRun, TrialRecord

    with get_session(url) as session:
        if run_id is None:
            run = session.query(BenchmarkRun).order_by(BenchmarkRun.id.desc()).first()
            if run is None:
                raise ContractViolationError("Results ledger has no benchmark runs")
            run_id = run.id
        records = session.query(TrialRecord).filter(TrialRecord.run_id == run_id).all()
        rows = [{
            'system': r.system,
            'method': r.method,
            'h': r.horizon,
            'safe': r.safe,
            'failed_steps': r.failed_steps or 0,
            'failure_cause': r.failure_cause,
            **{metric: getattr(r, metric) for metric in STEP_METRICS},
        } for r in records]

    if not rows:
        raise ContractViolationError(f"Benchmark run {run_id} has no trial records")

    trials = pd.DataFrame(rows)
    summaries = []
    for (system, method, h), group in trials.groupby(['system', 'method', 'h'], sort=True):
        safe = group[group['safe']]
        row = {'system': system, 'method': method, 'h': int(h), 'n_trials': len(group),
               'safety_rate': float(group['safe'].mean())}
        for metric in STEP_METRICS:
            values = pd.to_numeric(safe[metric], errors='coerce').dropna()
            row[f"{metric}_mean"] = float(values.mean()) if len(values) else None
            row[f"{metric}_std"] = float(values.std(ddof=0)) if len(values) else None
        row['n_safe'] = int(len(safe))
        row['failures_terminal_first'] = int((group['failure_cause'] == 'terminal_before_state').sum())
        row['failures_other'] = int(group['failure_cause'].notna().sum()) - row['failures_terminal_first']
        row['failed_steps'] = int(group['failed_steps'].sum())
        summaries.append(row)
    return pd.DataFrame(summaries)[SUMMARY_COLUMNS + EXTRA_COLUMNS]
