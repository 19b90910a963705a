"""
MPC на последовательном выпуклом программировании (SCP).

Три постановки на одном решателе:
    - vanilla: ограничение l(x_k) >= 0 при k = 0..h-1, без терминального условия;
    - svmpc (Safety Value MPC): то же плюс терминальное V_s(x_h) >= eps;
    - safety: приближенная задача безопасности, цель sum exp(-alpha l(x_k)) без ограничений на состояние.

Каждая итерация строит QP в отклонениях (dx, du, slack) от опорной траектории; кандидат заново
прогоняется от x0 через step(), принимается по убыванию точной штрафной функции.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from services.qp_solver import QpProblem, QpSolution, QpStatus, solve_qp
from services.reachability_service import ValueFunction
from systems.base import ControlAffineSystem
from utils.errors import ContractViolationError, IntegrationError

logger = logging.getLogger(__name__)

# Допуск нарушения нелинейных ограничений для converged=True
VIOLATION_TOL = 1e-4

# Нижняя граница расстояния в мажорирующей квадратичной модели ||p(x) - p_d||
DIST_FLOOR = 1e-3

OBJECTIVES = ('task', 'safety')


def trust_scales(system: ControlAffineSystem) -> Tuple[np.ndarray, np.ndarray]:
    """
    Масштабы компонент для доверительной области и нормы шага SCP.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (полуразмах осей сетки по состоянию, полуширина бокса управлений);
            без сетки масштаб состояния единичный
    """
    if len(system.grid_axes) == system.n_x:
        x_scale = np.array([0.5 * (axis.max - axis.min) for axis in system.grid_axes])
    else:
        x_scale = np.ones(system.n_x)
    return x_scale, system.controls.half_width.copy()


@dataclass(frozen=True)
class SafetyValueTerminal:
    """Терминальное ограничение V_s(x_h) >= epsilon"""

    value_fn: ValueFunction
    epsilon: float = 0.05


@dataclass(frozen=True)
class MpcConfig:
    """
    Параметры MPC.

    trust_region - относительный радиус: доля полуширины бокса для каждого управления и доля
    полуразмаха оси сетки для каждой компоненты состояния (см. trust_scales); scp_tol задан в тех же
    относительных единицах.
    """

    h: int
    dt: float = 0.04
    control_horizon: int = 1
    max_scp_iters: int = 15
    scp_tol: float = 1e-4
    trust_region: float = 0.5
    slack_penalty: float = 100.0
    terminal: Optional[SafetyValueTerminal] = None
    objective: str = 'task'
    alpha: float = 10.0
    max_shrinks: int = 5
    qp_eps: float = 1e-6
    qp_max_iter: int = 20000

    def __post_init__(self):
        if self.h < 1:
            raise ContractViolationError(f"Horizon must be positive, got {self.h}")
        if not 1 <= self.control_horizon <= self.h:
            raise ContractViolationError(f"Control horizon must satisfy 1 <= c <= h, got c={self.control_horizon}, h={self.h}")
        if self.dt <= 0:
            raise ContractViolationError(f"dt must be positive, got {self.dt}")
        if self.slack_penalty <= 0:
            raise ContractViolationError(f"slack_penalty must be positive, got {self.slack_penalty}")
        if self.trust_region <= 0:
            raise ContractViolationError(f"trust_region must be positive, got {self.trust_region}")
        if self.objective not in OBJECTIVES:
            raise ContractViolationError(f"Unknown objective {self.objective}, expected one of {OBJECTIVES}")
        if self.alpha <= 0:
            raise ContractViolationError(f"alpha must be positive, got {self.alpha}")


@dataclass
class ScpResult:
    states: np.ndarray
    controls: np.ndarray
    iterations: int = 0
    converged: bool = False
    max_violation: float = 0.0
    objective: float = 0.0
    terminal_residual: float = 0.0
    status: str = "initial"
    per_iteration_log: List[Dict[str, Any]] = field(default_factory=list)


class _Layout:
    """Раскладка вектора решений z = [dx_0..dx_h, du_0..du_{h-1}, s_0..s_{h-1}, s_T]"""

    def __init__(self, system: ControlAffineSystem, config: MpcConfig):
        self.n_x = system.n_x
        self.n_u = system.n_u
        self.h = config.h
        self.n_state_slacks = config.h if config.objective == 'task' else 0
        self.n_terminal = 1 if config.terminal is not None and config.objective == 'task' else 0
        self.x_offset = 0
        self.u_offset = self.n_x * (self.h + 1)
        self.s_offset = self.u_offset + self.n_u * self.h
        self.t_offset = self.s_offset + self.n_state_slacks
        self.size = self.t_offset + self.n_terminal

    def x(self, k: int) -> int:
        return self.x_offset + k * self.n_x

    def u(self, k: int) -> int:
        return self.u_offset + k * self.n_u

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dx = z[:self.u_offset].reshape(self.h + 1, self.n_x)
        du = z[self.u_offset:self.s_offset].reshape(self.h, self.n_u)
        return dx, du


class _RowAssembler:
    """Сборка разреженной матрицы ограничений по блокам"""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []
        self.lb: List[np.ndarray] = []
        self.ub: List[np.ndarray] = []
        self.n_rows = 0

    def add(self, blocks: List[Tuple[int, np.ndarray]], lb: np.ndarray, ub: np.ndarray):
        lb = np.atleast_1d(np.asarray(lb, dtype=float))
        for col0, block in blocks:
            block = np.atleast_2d(block)
            r, c = np.nonzero(block)
            self.rows.append(r + self.n_rows)
            self.cols.append(c + col0)
            self.vals.append(block[r, c])
        self.lb.append(lb)
        self.ub.append(np.broadcast_to(np.asarray(ub, dtype=float), lb.shape))
        self.n_rows += lb.size

    def matrix(self) -> sp.csc_matrix:
        if not self.rows:
            return sp.csc_matrix((self.n_rows, self.n_cols))
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_cols))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.lb), np.concatenate(self.ub)


def _goal_distance_model(system: ControlAffineSystem, states: np.ndarray):
    """Градиент и мажорирующий гессиан J^T J / ||e|| для ||p(x) - p_d|| по каждой точке траектории"""
    error = system.measured_position(states) - system.goal
    jac = system.position_jacobian(states)
    dist = np.linalg.norm(error, axis=-1)
    unit = np.where(dist[:, None] > 0, error / np.maximum(dist, 1e-300)[:, None], 0.0)
    grad = np.einsum('kpi,kp->ki', jac, unit)
    hess = np.einsum('kpi,kpj->kij', jac, jac) / np.maximum(dist, DIST_FLOOR)[:, None, None]
    return grad, hess


def _task_model(system: ControlAffineSystem, states: np.ndarray, controls: np.ndarray):
    grad_x, hess_x = _goal_distance_model(system, states)
    if system.velocity_indices:
        idx = list(system.velocity_indices)
        grad_x[:, idx] += 2.0 * system.weights.w_v * states[:, idx]
        hess_x[:, idx, idx] += 2.0 * system.weights.w_v
    grad_u = 2.0 * system.weights.w_u * controls
    hess_u = np.broadcast_to(2.0 * system.weights.w_u * np.eye(system.n_u), (controls.shape[0], system.n_u, system.n_u))
    return grad_x, hess_x, grad_u, hess_u


def _safety_model(system: ControlAffineSystem, states: np.ndarray, alpha: float):
    """Гаусс-Ньютон для sum exp(-alpha l(x_k))"""
    penalty = np.exp(-alpha * system.constraint_l(states))
    grad_l = system.constraint_gradient(states)
    grad_x = -alpha * penalty[:, None] * grad_l
    hess_x = alpha ** 2 * penalty[:, None, None] * np.einsum('ki,kj->kij', grad_l, grad_l)
    return grad_x, hess_x


def build_subproblem(system: ControlAffineSystem, config: MpcConfig, reference: ScpResult,
                     x0: np.ndarray, trust_radius: Optional[float] = None) -> QpProblem:
    """
    Выпуклая подзадача SCP вокруг опорной траектории.

    Args:
        system: Система
        config: Параметры MPC
        reference: Опорная траектория (states (h+1, n_x), controls (h, n_u))
        x0: Текущее состояние
        trust_radius: Относительный радиус доверительной области (по умолчанию config.trust_region)

    Returns:
        QpProblem: Подзадача; dx = du = 0 с достаточными слаками всегда допустимо
    """
    h = config.h
    states = np.asarray(reference.states, dtype=float)
    controls = np.asarray(reference.controls, dtype=float)
    if states.shape != (h + 1, system.n_x) or controls.shape != (h, system.n_u):
        raise ContractViolationError(
            f"Reference has shapes {states.shape}/{controls.shape}, expected {(h + 1, system.n_x)}/{(h, system.n_u)}")
    radius = config.trust_region if trust_radius is None else trust_radius
    layout = _Layout(system, config)
    x0 = system._check_state(x0)

    a_k, b_k = system.dynamics_jacobians(states[:h], controls, config.dt)
    defects = system.step(states[:h], controls, config.dt) - states[1:]

    # Распространение начального отклонения при du = 0: расширяет доверительную область по состоянию
    drift_error = np.zeros((h + 1, system.n_x))
    drift_error[0] = x0 - states[0]
    for k in range(h):
        drift_error[k + 1] = a_k[k] @ drift_error[k] + defects[k]

    # Стоимость
    hessians = []
    q = np.zeros(layout.size)
    if config.objective == 'task':
        grad_x, hess_x, grad_u, hess_u = _task_model(system, states, controls)
    else:
        grad_x, hess_x = _safety_model(system, states, config.alpha)
        grad_u = np.zeros_like(controls)
        hess_u = np.zeros((h, system.n_u, system.n_u))
    hessians.extend(hess_x)
    hessians.extend(hess_u)
    q[:layout.u_offset] = grad_x.ravel()
    q[layout.u_offset:layout.s_offset] = grad_u.ravel()
    q[layout.s_offset:] = config.slack_penalty
    n_slack = layout.size - layout.s_offset
    if n_slack:
        hessians.append(np.zeros((n_slack, n_slack)))
    p_matrix = sp.block_diag(hessians, format='csc')

    # Ограничения
    rows = _RowAssembler(layout.size)
    eye_x = np.eye(system.n_x)
    eye_u = np.eye(system.n_u)
    rows.add([(layout.x(0), eye_x)], drift_error[0], drift_error[0])
    for k in range(h):
        rows.add([(layout.x(k + 1), eye_x), (layout.x(k), -a_k[k]), (layout.u(k), -b_k[k])], defects[k], defects[k])

    box = system.controls
    x_scale, u_scale = trust_scales(system)
    for k in range(h):
        lower = np.maximum(box.lower - controls[k], -radius * u_scale)
        upper = np.minimum(box.upper - controls[k], radius * u_scale)
        rows.add([(layout.u(k), eye_u)], lower, upper)

    for k in range(1, h + 1):
        width = radius * x_scale + np.abs(drift_error[k])
        rows.add([(layout.x(k), eye_x)], -width, width)

    if layout.n_state_slacks:
        l_ref = system.constraint_l(states[:h])
        grad_l = system.constraint_gradient(states[:h])
        for k in range(h):
            rows.add([(layout.x(k), grad_l[k][None, :]), (layout.s_offset + k, np.ones((1, 1)))], -l_ref[k], np.inf)

    if layout.n_terminal:
        terminal = config.terminal
        v_ref = terminal.value_fn.interpolate(states[h])
        grad_v = terminal.value_fn.gradient(states[h])
        rows.add([(layout.x(h), grad_v[None, :]), (layout.t_offset, np.ones((1, 1)))],
                 terminal.epsilon - v_ref, np.inf)

    if n_slack:
        rows.add([(layout.s_offset, np.eye(n_slack))], np.zeros(n_slack), np.inf)

    lb, ub = rows.bounds()
    return QpProblem(P=p_matrix, q=q, A=rows.matrix(), lb=lb, ub=ub)


def _evaluate(system: ControlAffineSystem, config: MpcConfig, states: np.ndarray, controls: np.ndarray):
    """Истинная цель, нарушения ограничений и точная штрафная функция траектории"""
    h = config.h
    if config.objective == 'safety':
        objective = float(np.sum(np.exp(-config.alpha * system.constraint_l(states))))
        return objective, 0.0, 0.0, objective

    objective = float(np.sum(system.running_cost(states[:h], controls)) + system.terminal_cost(states[h]))
    state_violation = np.maximum(0.0, -system.constraint_l(states[:h]))
    terminal_residual = 0.0
    if config.terminal is not None:
        terminal_residual = max(0.0, config.terminal.epsilon - config.terminal.value_fn.interpolate(states[h]))
    max_violation = float(max(np.max(state_violation), terminal_residual))
    merit = objective + config.slack_penalty * (float(np.sum(state_violation)) + terminal_residual)
    return objective, max_violation, terminal_residual, merit


def _as_trajectory(system: ControlAffineSystem, x0: np.ndarray, controls: np.ndarray, dt: float) -> ScpResult:
    controls = system.controls.clip(controls)
    return ScpResult(states=system.rollout(x0, controls, dt), controls=controls)


def solve_scp(system: ControlAffineSystem, config: MpcConfig, x0: np.ndarray, guess: ScpResult) -> ScpResult:
    """
    Итерации SCP с доверительной областью и точной штрафной функцией.

    Args:
        system: Система
        config: Параметры MPC
        x0: Текущее состояние
        guess: Начальное приближение (управления; состояния пересчитываются прогоном от x0)

    Returns:
        ScpResult: Лучшее найденное решение; converged=True только при шаге < scp_tol и нарушении <= 1e-4
    """
    x0 = system._check_state(x0)
    reference = _as_trajectory(system, x0, np.asarray(guess.controls, dtype=float), config.dt)
    objective, max_violation, terminal_residual, merit = _evaluate(system, config, reference.states, reference.controls)

    radius = config.trust_region
    layout = _Layout(system, config)
    x_scale, u_scale = trust_scales(system)
    log: List[Dict[str, Any]] = []
    warm: Optional[QpSolution] = None
    status = "max_iters"
    stationary = False
    iteration = 0

    for iteration in range(1, config.max_scp_iters + 1):
        accepted = False
        step_norm = np.inf
        qp_status = None
        attempts = 0
        for attempts in range(1, config.max_shrinks + 2):
            problem = build_subproblem(system, config, reference, x0, radius)
            solution = solve_qp(problem, warm=warm, eps_abs=config.qp_eps, eps_rel=config.qp_eps,
                                max_iter=config.qp_max_iter)
            qp_status = solution.status
            if not solution.solved:
                break
            warm = solution

            dx, du = layout.split(solution.z)
            step_norm = float(max(np.max(np.abs(dx[1:]) / x_scale, initial=0.0), np.max(np.abs(du) / u_scale)))
            if step_norm < config.scp_tol:
                stationary = True
                break

            try:
                candidate = _as_trajectory(system, x0, reference.controls + du, config.dt)
                cand_eval = _evaluate(system, config, candidate.states, candidate.controls)
            except IntegrationError as e:
                logger.debug(f"SCP candidate rejected: {e}")
                cand_eval = None

            if cand_eval is not None and cand_eval[3] < merit:
                # Относительное убывание штрафной функции ниже scp_tol - тоже стационарность
                stationary = merit - cand_eval[3] <= config.scp_tol * max(1.0, abs(merit))
                reference = candidate
                objective, max_violation, terminal_residual, merit = cand_eval
                accepted = True
                break
            radius *= 0.5

        log.append({
            "iteration": iteration,
            "attempts": attempts,
            "accepted": accepted,
            "merit": merit,
            "objective": objective,
            "max_violation": max_violation,
            "trust_radius": radius,
            "step_norm": step_norm,
            "qp_status": qp_status.value if qp_status is not None else None,
        })
        logger.debug(f"SCP iterate {iteration}: merit={merit:.6g}, step={step_norm:.2e}, "
                     f"radius={radius:.3g}, accepted={accepted}")

        if qp_status is not None and qp_status != QpStatus.SOLVED:
            status = "qp_failed"
            logger.warning(f"SCP subproblem returned {qp_status.value} at iterate {iteration}")
            break
        if stationary:
            status = "stationary"
            break
        if not accepted:
            status = "stalled"
            break
        radius = min(2.0 * radius, config.trust_region)

    converged = stationary and max_violation <= VIOLATION_TOL
    return ScpResult(
        states=reference.states,
        controls=reference.controls,
        iterations=iteration,
        converged=converged,
        max_violation=max_violation,
        objective=objective,
        terminal_residual=terminal_residual,
        status=status,
        per_iteration_log=log,
    )


def cold_start(system: ControlAffineSystem, x0: np.ndarray, h: int, dt: float) -> ScpResult:
    """Холодный старт: управление удержания на всем горизонте"""
    hold = system.hold_control(x0)
    controls = np.tile(hold, (h, 1))
    return _as_trajectory(system, x0, controls, dt)


def warm_start(system: ControlAffineSystem, previous: ScpResult, x_new: np.ndarray, c: int, dt: float) -> ScpResult:
    """Сдвиг предыдущего решения на c шагов, повтор последнего управления, прогон от x_new"""
    controls = np.asarray(previous.controls, dtype=float)
    shifted = np.concatenate([controls[c:], np.repeat(controls[-1:], c, axis=0)], axis=0)
    return _as_trajectory(system, x_new, shifted, dt)


class MpcController:
    """Скользящий горизонт: хранит предыдущее решение для теплого старта"""

    def __init__(self, system: ControlAffineSystem, config: MpcConfig):
        self.system = system
        self.config = config
        self.previous: Optional[ScpResult] = None

    def reset(self):
        self.previous = None

    def step(self, x: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
        """
        Один цикл перепланирования.

        Returns:
            Tuple[np.ndarray, Dict]: Первые c управлений (c, n_u) и диагностика шага
        """
        config = self.config
        if self.previous is None:
            guess = cold_start(self.system, x, config.h, config.dt)
        else:
            guess = warm_start(self.system, self.previous, x, config.control_horizon, config.dt)

        started = time.perf_counter()
        result = solve_scp(self.system, config, x, guess)
        plan_ms = (time.perf_counter() - started) * 1000.0
        self.previous = result

        if not result.converged:
            logger.debug(f"MPC step not converged: {result.status}, violation={result.max_violation:.2e}")

        diagnostics = {
            "iterations": result.iterations,
            "plan_ms": plan_ms,
            "converged": result.converged,
            "failed": not result.converged,
            "max_violation": result.max_violation,
            "terminal_residual": result.terminal_residual,
            "objective": result.objective,
            "status": result.status,
        }
        return result.controls[:config.control_horizon].copy(), diagnostics


def mpc_step(controller: MpcController, x: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
    return controller.step(x)


@dataclass(frozen=True)
class SafetyEstimate:
    """Оценка V_s(x) приближенной задачей безопасности; converged=False - оценка по лучшему найденному решению"""

    value: float
    converged: bool
    status: str
    iterations: int

    def __float__(self) -> float:
        return self.value


def approx_safety_value(system: ControlAffineSystem, x: np.ndarray, horizon_steps: int, dt: float,
                        alpha: float = 10.0, config: Optional[MpcConfig] = None) -> SafetyEstimate:
    """
    Оценка функции ценности безопасности: min_k l(x_k) вдоль траектории, оптимизирующей sum exp(-alpha l).

    При неудаче SCP возвращается оценка по лучшему найденному решению с converged=False.
    """
    base = config or MpcConfig(h=horizon_steps, dt=dt)
    config = replace(base, h=horizon_steps, dt=dt, objective='safety', alpha=alpha, terminal=None,
                     control_horizon=1)
    x = system._check_state(x)
    result = solve_scp(system, config, x, cold_start(system, x, horizon_steps, dt))
    if not result.converged:
        logger.warning(f"Approximate safety OCP did not converge ({result.status}) at x={x.tolist()}")
    return SafetyEstimate(
        value=float(np.min(system.constraint_l(result.states))),
        converged=result.converged,
        status=result.status,
        iterations=result.iterations,
    )
