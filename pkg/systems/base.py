import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from utils.errors import ContractViolationError, IntegrationError

logger = logging.getLogger(__name__)

# Порог "активного" ограничения на управление для метрик
TOL_ACTIVE = 1e-6

# Шаг центральных конечных разностей
FD_STEP = 1e-6


@dataclass(frozen=True)
class ControlBox:
    """Прямоугольное множество допустимых управлений U = [lower, upper]"""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ContractViolationError(f"Control bounds shape mismatch: {lower.shape} vs {upper.shape}")
        if not np.all(lower < upper):
            raise ContractViolationError(f"Control box requires lower < upper, got {lower} and {upper}")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @property
    def n_u(self) -> int:
        return self.lower.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def corners(self) -> np.ndarray:
        """Все 2^n_u вершины бокса, массив (2^n_u, n_u)"""
        grids = np.meshgrid(*[[lo, hi] for lo, hi in zip(self.lower, self.upper)], indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=-1)

    def levels(self, per_axis: int) -> np.ndarray:
        """Равномерная сетка управлений (включая крайние точки), массив (per_axis^n_u, n_u)"""
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(self.lower, self.upper)]
        grids = np.meshgrid(*axes, indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=-1)

    def residuals(self, u: np.ndarray) -> np.ndarray:
        """g(u): 2*n_u невязок (u - lower, upper - u); все >= 0 тогда и только тогда, когда u допустимо"""
        u = np.asarray(u, dtype=float)
        return np.concatenate([u - self.lower, self.upper - u], axis=-1)


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ContractViolationError(f"Obstacle radius must be positive, got {self.radius}")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=-1) - self.radius


@dataclass(frozen=True)
class CostWeights:
    """Веса квадратичных регуляризаторов поверх расстояния до цели"""

    w_u: float = 1e-2
    w_v: float = 1e-2


class ControlAffineSystem(ABC):
    """
    Управляемая аффинная система x' = a(x) + B(x) u.

    Все методы принимают как одиночное состояние (n_x,), так и пачку состояний (..., n_x);
    после конструирования объект не изменяется и может разделяться между воркерами.
    """

    name: str = "system"
    n_x: int = 0
    n_u: int = 0
    # Индексы скоростных компонент состояния (для регуляризатора w_v)
    velocity_indices: Tuple[int, ...] = ()
    # l(x) задается круговым препятствием
    requires_obstacle: bool = True

    def __init__(self, controls: ControlBox, goal: Optional[np.ndarray] = None,
                 obstacle: Optional[Obstacle] = None, weights: Optional[CostWeights] = None,
                 grid_axes: Optional[list] = None, params: Optional[Dict] = None):
        if controls.n_u != self.n_u:
            raise ContractViolationError(
                f"{self.name}: control box has dimension {controls.n_u}, expected {self.n_u}")
        self.controls = controls
        self.goal = None if goal is None else np.asarray(goal, dtype=float)
        self.obstacle = obstacle
        self.weights = weights or CostWeights()
        self.grid_axes = grid_axes or []
        self.params = dict(params or {})

    # ---------------------------
    # Динамика
    # ---------------------------

    @abstractmethod
    def drift(self, x: np.ndarray) -> np.ndarray:
        """a(x), форма (..., n_x)"""

    @abstractmethod
    def input_matrix(self, x: np.ndarray) -> np.ndarray:
        """B(x), форма (..., n_x, n_u) (допускается broadcast-представление)"""

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n_x,):
            raise ContractViolationError(f"{self.name}: state must have last dimension {self.n_x}, got {x.shape}")
        return x

    def _check_control(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            u = u.reshape(1)
        if u.shape[-1:] != (self.n_u,):
            raise ContractViolationError(f"{self.name}: control must have last dimension {self.n_u}, got {u.shape}")
        return u

    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f(x, u) = a(x) + B(x) u"""
        x = self._check_state(x)
        u = self._check_control(u)
        return self.drift(x) + np.einsum('...ij,...j->...i', self.input_matrix(x), u)

    def step(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        """
        Один шаг RK4 с удержанием управления нулевого порядка (дискретная модель f_d).

        Args:
            x: Состояние (или пачка состояний)
            u: Управление, постоянное на шаге
            dt: Шаг по времени, секунды

        Returns:
            np.ndarray: Следующее состояние
        """
        if dt <= 0:
            raise ContractViolationError(f"Time step must be positive, got {dt}")
        x = self._check_state(x)
        u = self._check_control(u)
        k1 = self.dynamics(x, u)
        k2 = self.dynamics(x + 0.5 * dt * k1, u)
        k3 = self.dynamics(x + 0.5 * dt * k2, u)
        k4 = self.dynamics(x + dt * k3, u)
        x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x_next)):
            raise IntegrationError(f"{self.name}: non-finite state after RK4 step (dt={dt})")
        return x_next

    def rollout(self, x0: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
        """Траектория (len(controls)+1, n_x) из x0 при заданной последовательности управлений"""
        x = self._check_state(x0)
        states = [x]
        for u in controls:
            x = self.step(x, u, dt)
            states.append(x)
        return np.array(states)

    def hold_control(self, x: np.ndarray) -> np.ndarray:
        """Управление "удержания" для холодного старта; для точечных систем ноль"""
        return self.controls.clip(np.zeros(self.n_u))

    # ---------------------------
    # Ограничения
    # ---------------------------

    def measured_position(self, x: np.ndarray) -> np.ndarray:
        """Точка, по которой считаются расстояния до препятствия и до цели"""
        raise NotImplementedError(f"{self.name} does not define a measured position")

    def constraint_l(self, x: np.ndarray) -> np.ndarray:
        """l(x): >= 0 тогда и только тогда, когда состояние допустимо"""
        x = self._check_state(x)
        return self.obstacle.signed_distance(self.measured_position(x))

    def control_constraint_g(self, u: np.ndarray) -> np.ndarray:
        return self.controls.residuals(self._check_control(u))

    def active_control_constraints(self, u: np.ndarray, tol: float = TOL_ACTIVE) -> int:
        """Число ограничений управления, активных с точностью tol"""
        return int(np.sum(np.abs(self.control_constraint_g(u)) <= tol))

    # ---------------------------
    # Стоимости
    # ---------------------------

    def distance_to_goal(self, x: np.ndarray) -> np.ndarray:
        x = self._check_state(x)
        return np.linalg.norm(self.measured_position(x) - self.goal, axis=-1)

    def _velocity_penalty(self, x: np.ndarray) -> np.ndarray:
        if not self.velocity_indices:
            return np.zeros(x.shape[:-1])
        v = x[..., list(self.velocity_indices)]
        return self.weights.w_v * np.sum(v ** 2, axis=-1)

    def running_cost(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """r(x, u) = ||p(x) - p_d|| + w_u ||u||^2 + w_v ||v||^2"""
        u = self._check_control(u)
        return self.distance_to_goal(x) + self.weights.w_u * np.sum(u ** 2, axis=-1) + self._velocity_penalty(x)

    def terminal_cost(self, x: np.ndarray) -> np.ndarray:
        """phi(x) = ||p(x) - p_d|| + w_v ||v||^2"""
        return self.distance_to_goal(x) + self._velocity_penalty(self._check_state(x))

    # ---------------------------
    # Производные
    # ---------------------------

    def dynamics_jacobians(self, x: np.ndarray, u: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Якобианы дискретного отображения step(x, u, dt) центральными разностями.

        Принимает пачку точек (h, n_x), (h, n_u) и возвращает A (h, n_x, n_x), B (h, n_x, n_u);
        все возмущения считаются одним векторизованным вызовом step.
        """
        x = self._check_state(x)
        u = self._check_control(u)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(u)
        n_z = self.n_x + self.n_u
        eye = np.eye(n_z) * FD_STEP
        # (h, 2*n_z, n_z): сначала +e_i, затем -e_i
        z = np.concatenate([xb, ub], axis=-1)[:, None, :]
        perturbed = np.concatenate([z + eye[None], z - eye[None]], axis=1)
        nxt = self.step(perturbed[..., :self.n_x], perturbed[..., self.n_x:], dt)
        jac = (nxt[:, :n_z, :] - nxt[:, n_z:, :]) / (2.0 * FD_STEP)
        jac = np.swapaxes(jac, 1, 2)
        a_k, b_k = jac[:, :, :self.n_x], jac[:, :, self.n_x:]
        if single:
            return a_k[0], b_k[0]
        return a_k, b_k

    def _scalar_gradient(self, fn, x: np.ndarray) -> np.ndarray:
        """Градиент скалярной функции состояния центральными разностями (пачкой)"""
        xb = np.atleast_2d(x)
        n = xb.shape[-1]
        eye = np.eye(n) * FD_STEP
        plus = fn(xb[:, None, :] + eye[None])
        minus = fn(xb[:, None, :] - eye[None])
        grad = (plus - minus) / (2.0 * FD_STEP)
        return grad[0] if np.ndim(x) == 1 else grad

    def constraint_gradient(self, x: np.ndarray) -> np.ndarray:
        return self._scalar_gradient(self.constraint_l, self._check_state(x))

    def goal_distance_gradient(self, x: np.ndarray) -> np.ndarray:
        return self._scalar_gradient(self.distance_to_goal, self._check_state(x))

    def position_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d p(x) / dx, форма (..., n_p, n_x)"""
        x = self._check_state(x)
        xb = np.atleast_2d(x)
        eye = np.eye(self.n_x) * FD_STEP
        plus = self.measured_position(xb[:, None, :] + eye[None])
        minus = self.measured_position(xb[:, None, :] - eye[None])
        jac = np.swapaxes((plus - minus) / (2.0 * FD_STEP), 1, 2)
        return jac[0] if x.ndim == 1 else jac

    def cost_gradients(self, x: np.ndarray, u: np.ndarray) -> Dict[str, np.ndarray]:
        """
        Градиенты стоимостей и ограничения l в точке (x, u).

        Returns:
            Dict: running_x, running_u, terminal_x, constraint_x
        """
        x = self._check_state(x)
        u = self._check_control(u)
        velocity_grad = np.zeros_like(x)
        if self.velocity_indices:
            idx = list(self.velocity_indices)
            velocity_grad[..., idx] = 2.0 * self.weights.w_v * x[..., idx]
        goal_grad = self.goal_distance_gradient(x)
        return {
            "running_x": goal_grad + velocity_grad,
            "running_u": 2.0 * self.weights.w_u * u,
            "terminal_x": goal_grad + velocity_grad,
            "constraint_x": self.constraint_gradient(x),
        }

    def __str__(self) -> str:
        return f"{self.__class__.__name__}(name={self.name}, n_x={self.n_x}, n_u={self.n_u})"

    def __repr__(self) -> str:
        return self.__str__()


@dataclass
class Trajectory:
    """Замкнутая траектория: моменты времени, состояния и примененные управления"""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    info: Dict = field(default_factory=dict)
