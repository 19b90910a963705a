import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np
import scipy.sparse as sp

from services.qp_solver import QpProblem, solve_qp
from services.reachability_service import ValueFunction, optimal_safe_control
from systems.base import ControlAffineSystem
from utils.errors import ContractViolationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    value_fn: ValueFunction
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractViolationError(f"gamma must be positive, got {self.gamma}")


def filter_control(system: ControlAffineSystem, config: FilterConfig, x: np.ndarray,
                   u_nom: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Минимальная коррекция номинального управления под условие grad V^T f(x, u) >= -gamma V(x).

    Args:
        system: Система
        config: Параметры фильтра
        x: Состояние
        u_nom: Номинальное управление (обрезается по боксу)

    Returns:
        Tuple[np.ndarray, Dict]: Управление и диагностика {fallback, modified, value, qp_status}
    """
    x = system._check_state(x)
    u_nom = system.controls.clip(system._check_control(u_nom))
    value = config.value_fn.interpolate(x)
    grad = config.value_fn.gradient(x)

    # Условие в виде c^T u >= rhs
    c = grad @ system.input_matrix(x)
    rhs = -config.gamma * value - grad @ system.drift(x)
    info = {"fallback": False, "modified": False, "value": value, "qp_status": None}

    if c @ u_nom >= rhs:
        return u_nom, info

    box = system.controls
    best_rate = float(np.sum(np.maximum(c * box.lower, c * box.upper)))
    if best_rate < rhs:
        logger.debug(f"Filter constraint unreachable at V={value:.4f}: using optimal safe control")
        info["fallback"] = True
        return optimal_safe_control(system, x, grad), info

    n_u = system.n_u
    problem = QpProblem(
        P=2.0 * sp.eye(n_u, format='csc'),
        q=-2.0 * u_nom,
        A=sp.vstack([sp.csc_matrix(c[None, :]), sp.eye(n_u)], format='csc'),
        lb=np.concatenate([[rhs], box.lower]),
        ub=np.concatenate([[np.inf], box.upper]),
    )
    solution = solve_qp(problem)
    info["qp_status"] = solution.status.value
    if not solution.solved:
        logger.warning(f"Filter QP returned {solution.status.value}: using optimal safe control")
        info["fallback"] = True
        return optimal_safe_control(system, x, grad), info

    info["modified"] = True
    return box.clip(solution.z), info
