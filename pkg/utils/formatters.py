import math
from typing import Any, Dict, List, Optional

# Число знаков после запятой для метрик: метры - 4, счетчики и миллисекунды - 3
METRIC_DECIMALS = {
    'avg_dist_goal': 4,
    'avg_dist_obs': 4,
    'avg_active_ctrl': 3,
    'avg_scp_iters': 3,
    'avg_plan_ms': 3,
}

METRIC_TITLES = {
    'safety_rate': 'Safety Rate',
    'avg_dist_goal': 'Avg Dist Goal',
    'avg_dist_obs': 'Avg Dist Obs',
    'avg_active_ctrl': 'Avg Active Ctrl',
    'avg_scp_iters': 'Avg SCP Iters',
    'avg_plan_ms': 'Avg Planning Time (ms)',
}

METHOD_TITLES = {
    'vanilla': 'MPC',
    'svmpc': 'OURS',
    'filter': 'SB-Filter',
}

MISSING = 'n/a'


def _is_missing(value: Any) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def format_mean_std(mean: Optional[float], std: Optional[float], decimals: int) -> str:
    """
    Ячейка таблицы в виде mean±std

    Args:
        mean: Среднее
        std: Стандартное отклонение
        decimals: Число знаков после запятой

    Returns:
        str: Например, "0.4023±0.0535"; "n/a", если метрика отсутствует
    """
    if _is_missing(mean) or _is_missing(std):
        return MISSING
    return f"{mean:.{decimals}f}±{std:.{decimals}f}"


def format_rate(rate: Optional[float]) -> str:
    """Доля безопасных испытаний в процентах"""
    if _is_missing(rate):
        return MISSING
    return f"{rate * 100:.0f}%"


def format_metric_cell(row: Dict[str, Any], metric: str) -> str:
    """Ячейка метрики для строки сводки (ключи <metric>_mean / <metric>_std)"""
    if metric == 'safety_rate':
        return format_rate(row.get('safety_rate'))
    return format_mean_std(row.get(f"{metric}_mean"), row.get(f"{metric}_std"), METRIC_DECIMALS[metric])


def format_table(headers: List[str], rows: List[List[str]]) -> str:
    """Текстовая таблица с выравниванием по ширине столбцов"""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for row in rows:
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def format_solve_report(provenance: Dict[str, Any]) -> str:
    """Краткий отчет о решении HJB для вывода в консоль"""
    status = "сошлось" if provenance.get('converged') else "не сошлось"
    text = f"HJB: {status} за {provenance.get('steps', 0)} итераций"
    text += f", невязка {provenance.get('residual', float('nan')):.3e}"
    text += f", время {provenance.get('wall_time_s', 0.0):.1f} с"
    if 'safe_volume_fraction' in provenance:
        text += f", доля безопасных узлов {provenance['safe_volume_fraction'] * 100:.1f}%"
    return text
