"""
Сеточный решатель вариационного неравенства HJB для функции ценности безопасности.

V(x) = sup_u min_t l(x(t)) считается обратным маршем по времени со схемой Лакса-Фридрихса
первого порядка до сходимости; нулевое суперуровневое множество V - безопасное множество.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np

from grid.field import AxisSpec, GridField
from systems.base import ControlAffineSystem, Trajectory
from utils.errors import ContractViolationError, DegenerateDynamicsError, RefusalError, SolverError

logger = logging.getLogger(__name__)

# Порог |p^T B_j|, ниже которого управление по оси j берется в середине бокса
TIE_TOL = 1e-12

# Предел перебора в brute_force_value
MAX_SEQUENCES = 10 ** 7

# Максимальный подшаг интегрирования при переборе, секунды
BRUTE_FORCE_SUBSTEP = 0.05

_NODE_CHUNK = 65536
_SEQUENCE_CHUNK = 20000


@dataclass(frozen=True)
class HjbConfig:
    cfl: float = 0.5
    convergence_tol: float = 1e-4
    max_steps: int = 20000

    def __post_init__(self):
        if not 0.0 < self.cfl <= 1.0:
            raise ContractViolationError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.convergence_tol <= 0:
            raise ContractViolationError(f"convergence_tol must be positive, got {self.convergence_tol}")
        if self.max_steps < 1:
            raise ContractViolationError(f"max_steps must be positive, got {self.max_steps}")


@dataclass
class ValueFunction:
    """Сошедшаяся функция ценности безопасности на сетке и отчет о ее вычислении"""

    field: GridField
    system_name: str
    epsilon_default: float = 0.05
    provenance: Dict[str, Any] = field(default_factory=dict)

    def interpolate(self, x: np.ndarray):
        return self.field.interpolate(x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.field.gradient(x)

    def is_clamped(self, x: np.ndarray):
        return self.field.is_clamped(x)

    def safe_volume_fraction(self) -> float:
        """Доля узлов сетки с V >= 0"""
        return float(np.mean(self.field.values >= 0.0))

    def max_violation_of_upper_bound(self, system: ControlAffineSystem) -> float:
        """max по узлам (V - l); для корректного решения <= 0"""
        l_nodes = system.constraint_l(self.field.node_points())
        return float(np.max(self.field.flat_values - l_nodes))


def _costate_projection(b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """s_j = p^T B_j для пачки точек"""
    return np.einsum('...i,...ij->...j', p, b)


def _box_maximum(system: ControlAffineSystem, s: np.ndarray) -> np.ndarray:
    box = system.controls
    return np.sum(np.maximum(s * box.lower, s * box.upper), axis=-1)


def hamiltonian(system: ControlAffineSystem, x: np.ndarray, p: np.ndarray):
    """
    H(x, p) = max_{u in U} p^T f(x, u), аналитически по вершинам бокса.

    Принимает одиночную точку или пачку; для одиночной возвращает float.
    """
    x = system._check_state(x)
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (system.n_x,):
        raise ContractViolationError(f"Costate must have last dimension {system.n_x}, got {p.shape}")
    s = _costate_projection(system.input_matrix(x), p)
    value = np.sum(p * system.drift(x), axis=-1) + _box_maximum(system, s)
    return float(value) if np.ndim(value) == 0 else value


def optimal_safe_control(system: ControlAffineSystem, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Аргмаксимум гамильтониана: bang-bang по знаку p^T B_j, середина бокса при нулевом знаке"""
    x = system._check_state(x)
    p = np.asarray(p, dtype=float)
    s = _costate_projection(system.input_matrix(x), p)
    box = system.controls
    u = np.where(s > TIE_TOL, box.upper, np.where(s < -TIE_TOL, box.lower, box.midpoint))
    return u


def lf_dissipation(system: ControlAffineSystem, grid: GridField) -> np.ndarray:
    """
    Коэффициенты Лакса-Фридрихса alpha_i = max |f_i(x, u)| по узлам сетки и вершинам бокса.

    Raises:
        DegenerateDynamicsError: все коэффициенты нулевые
    """
    nodes = grid.node_points()
    corners = system.controls.corners()
    alpha = np.zeros(system.n_x)
    for start in range(0, nodes.shape[0], _NODE_CHUNK):
        chunk = nodes[start:start + _NODE_CHUNK]
        a = system.drift(chunk)
        b = system.input_matrix(chunk)
        # (chunk, corners, n_x)
        f = a[:, None, :] + np.einsum('nij,kj->nki', b, corners)
        alpha = np.maximum(alpha, np.max(np.abs(f), axis=(0, 1)))

    if not np.any(alpha > 0):
        raise DegenerateDynamicsError(f"{system.name}: dynamics vanish on the whole grid")
    return alpha


def _neighbor_indices(axis: AxisSpec):
    n = axis.n
    if axis.periodic:
        # Узлы 0 и n-1 совпадают: их соседи - n-2 слева и 1 справа
        left = np.concatenate([[n - 2], np.arange(0, n - 1)])
        right = np.concatenate([np.arange(1, n), [1]])
    else:
        left = np.concatenate([[0], np.arange(0, n - 1)])
        right = np.concatenate([np.arange(1, n), [n - 1]])
    return left, right


def _one_sided_differences(values: np.ndarray, axes: Sequence[AxisSpec]):
    """D- и D+ по каждой оси, форма shape + (d,); на непериодической границе - линейная экстраполяция"""
    minus, plus = [], []
    for i, axis in enumerate(axes):
        left, right = _neighbor_indices(axis)
        d_minus = (values - np.take(values, left, axis=i)) / axis.spacing
        d_plus = (np.take(values, right, axis=i) - values) / axis.spacing
        if not axis.periodic:
            first = [slice(None)] * values.ndim
            last = [slice(None)] * values.ndim
            first[i] = 0
            last[i] = axis.n - 1
            d_minus[tuple(first)] = d_plus[tuple(first)]
            d_plus[tuple(last)] = d_minus[tuple(last)]
        minus.append(d_minus)
        plus.append(d_plus)
    return np.stack(minus, axis=-1), np.stack(plus, axis=-1)


def solve_converged(system: ControlAffineSystem, axes: Optional[Sequence[AxisSpec]] = None,
                    config: Optional[HjbConfig] = None, epsilon_default: float = 0.05) -> ValueFunction:
    """
    Обратный марш V <- min(l, V + dt * H_LF) от V = l до стационарности.

    Args:
        system: Система
        axes: Оси сетки (по умолчанию из конфигурации системы)
        config: Параметры решателя
        epsilon_default: Запас по уровню для терминального ограничения

    Returns:
        ValueFunction: Решение; несошедшийся расчет помечается в provenance

    Raises:
        SolverError: NaN в ходе итераций
    """
    config = config or HjbConfig()
    axes = list(axes or system.grid_axes)
    if len(axes) != system.n_x:
        raise ContractViolationError(f"{system.name}: grid has {len(axes)} axes, state has {system.n_x}")

    started = time.perf_counter()
    l_field = GridField.from_function(axes, system.constraint_l)
    shape = l_field.shape
    l_values = l_field.values
    spacing = l_field.spacing

    nodes = l_field.node_points()
    drift = system.drift(nodes)
    input_matrix = system.input_matrix(nodes)
    alpha = lf_dissipation(system, l_field)
    dt = config.cfl / float(np.sum(alpha / spacing))
    logger.info(f"HJB solve for {system.name}: grid {shape}, alpha={alpha.tolist()}, dt={dt:.3e}")

    values = np.array(l_values)
    residual = math.inf
    steps = 0
    converged = False
    while steps < config.max_steps:
        d_minus, d_plus = _one_sided_differences(values, axes)
        p_mean = (0.5 * (d_minus + d_plus)).reshape(-1, system.n_x)
        s = _costate_projection(input_matrix, p_mean)
        h = np.sum(p_mean * drift, axis=-1) + _box_maximum(system, s)
        dissipation = np.sum(alpha * 0.5 * (d_plus - d_minus), axis=-1)
        updated = np.minimum(l_values, values + dt * (h.reshape(shape) + dissipation))

        if not np.all(np.isfinite(updated)):
            raise SolverError(f"{system.name}: non-finite value after {steps} sweeps")

        residual = float(np.max(np.abs(updated - values)))
        values = updated
        steps += 1
        if steps % 200 == 0:
            logger.debug(f"HJB sweep {steps}: residual={residual:.3e}")
        if residual < config.convergence_tol * dt:
            converged = True
            break

    wall_time = time.perf_counter() - started
    status = "converged" if converged else "max_steps"
    if converged:
        logger.info(f"HJB converged in {steps} sweeps ({wall_time:.1f} s), residual={residual:.3e}")
    else:
        logger.warning(f"HJB did not converge in {config.max_steps} sweeps, residual={residual:.3e}")

    provenance = {
        "steps": steps,
        "residual": residual,
        "wall_time_s": wall_time,
        "converged": converged,
        "status": status,
        "dt": dt,
        "alpha": alpha.tolist(),
        **asdict(config),
    }
    return ValueFunction(GridField(axes, values), system.name, epsilon_default, provenance)


def safe_set_membership(value_fn: ValueFunction, x: np.ndarray, eps: float) -> bool:
    """x принадлежит {V >= eps} (замкнутое множество)"""
    return bool(value_fn.interpolate(x) >= eps)


def safe_policy_rollout(system: ControlAffineSystem, value_fn: ValueFunction, x0: np.ndarray,
                        duration: float, dt: float) -> Trajectory:
    """Замкнутая траектория под оптимальным безопасным управлением u*(x) = argmax H(x, grad V)"""
    x = system._check_state(x0)
    n_steps = int(round(duration / dt))
    states = [x]
    controls = []
    for _ in range(n_steps):
        u = optimal_safe_control(system, x, value_fn.gradient(x))
        x = system.step(x, u, dt)
        controls.append(u)
        states.append(x)

    states = np.array(states)
    min_l = float(np.min(system.constraint_l(states)))
    return Trajectory(
        times=np.arange(n_steps + 1) * dt,
        states=states,
        controls=np.array(controls).reshape(n_steps, system.n_u),
        info={"min_l": min_l},
    )


def brute_force_value(system: ControlAffineSystem, x: np.ndarray, horizon: float, n_segments: int,
                      controls_per_axis: int) -> float:
    """
    Перебор кусочно-постоянных управлений: max по последовательностям min по траектории l.

    Raises:
        RefusalError: число последовательностей больше MAX_SEQUENCES
    """
    x = system._check_state(x)
    levels = system.controls.levels(controls_per_axis)
    n_levels = levels.shape[0]
    n_sequences = n_levels ** n_segments
    if n_sequences > MAX_SEQUENCES:
        raise RefusalError(f"{n_sequences} control sequences exceed the enumeration budget {MAX_SEQUENCES}")

    segment = horizon / n_segments
    substeps = max(1, int(math.ceil(segment / BRUTE_FORCE_SUBSTEP)))
    sub_dt = segment / substeps
    l0 = float(system.constraint_l(x))

    best = -math.inf
    for start in range(0, n_sequences, _SEQUENCE_CHUNK):
        ids = np.arange(start, min(start + _SEQUENCE_CHUNK, n_sequences))
        # Цифры номера последовательности в системе счисления n_levels: первая цифра - первый сегмент
        digits = np.stack([(ids // n_levels ** (n_segments - 1 - k)) % n_levels for k in range(n_segments)], axis=-1)
        states = np.broadcast_to(x, (ids.size, system.n_x)).copy()
        worst = np.full(ids.size, l0)
        for k in range(n_segments):
            u = levels[digits[:, k]]
            for _ in range(substeps):
                states = system.step(states, u, sub_dt)
                worst = np.minimum(worst, system.constraint_l(states))
        best = max(best, float(np.max(worst)))
    return best
