"""
Настольные эталонные системы (размерность <= 4), для которых сеточный HJB-решатель точен.

Integrator1D и DoubleIntegrator1D имеют аналитические функции ценности и служат тестовыми
случаями; PointMass2D, DubinsCar и TwoLinkArm - сценарии обхода кругового препятствия.
"""

import logging
from typing import Tuple

import numpy as np

from systems.base import ControlAffineSystem

logger = logging.getLogger(__name__)


class _LinearSystem(ControlAffineSystem):
    """Линейная система x' = F x + G u с зарегистрированными точными якобианами RK4"""

    F: np.ndarray
    G: np.ndarray

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return np.einsum('ij,...j->...i', self.F, x)

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.G, x.shape[:-1] + self.G.shape)

    def dynamics_jacobians(self, x, u, dt):
        # Для нильпотентной F ряд exp(F dt) обрывается, и RK4 его воспроизводит точно
        n = self.n_x
        a_k = np.eye(n) + self.F * dt + self.F @ self.F * dt ** 2 / 2.0
        b_k = self.G * dt + self.F @ self.G * dt ** 2 / 2.0
        x = self._check_state(x)
        if x.ndim == 1:
            return a_k, b_k
        lead = x.shape[:-1]
        return np.broadcast_to(a_k, lead + a_k.shape).copy(), np.broadcast_to(b_k, lead + b_k.shape).copy()

    def measured_position(self, x):
        return np.asarray(x, dtype=float)[..., :1]


class Integrator1D(_LinearSystem):
    """x' = u, u in [-1, 1], l(x) = 1 - |x|"""

    name = "integrator_1d"
    n_x = 1
    n_u = 1
    requires_obstacle = False
    F = np.zeros((1, 1))
    G = np.ones((1, 1))

    def constraint_l(self, x):
        x = self._check_state(x)
        return 1.0 - np.abs(x[..., 0])


class DoubleIntegrator1D(_LinearSystem):
    """x' = v, v' = u, |u| <= u_max, l(x, v) = x"""

    name = "double_integrator_1d"
    n_x = 2
    n_u = 1
    requires_obstacle = False
    velocity_indices = (1,)
    F = np.array([[0.0, 1.0], [0.0, 0.0]])
    G = np.array([[0.0], [1.0]])

    def constraint_l(self, x):
        x = self._check_state(x)
        return x[..., 0].copy()

    def analytic_value(self, x):
        """V_s(x, v) = x - max(0, -v)^2 / (2 u_max)"""
        x = self._check_state(x)
        u_max = float(self.controls.upper[0])
        return x[..., 0] - np.maximum(0.0, -x[..., 1]) ** 2 / (2.0 * u_max)


class PointMass2D(_LinearSystem):
    """Точечная масса на плоскости: состояние (px, py, vx, vy), управление (ax, ay)"""

    name = "point_mass_2d"
    n_x = 4
    n_u = 2
    velocity_indices = (2, 3)
    F = np.array([[0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0],
                  [0.0, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 0.0, 0.0]])
    G = np.array([[0.0, 0.0],
                  [0.0, 0.0],
                  [1.0, 0.0],
                  [0.0, 1.0]])

    def measured_position(self, x):
        return np.asarray(x, dtype=float)[..., :2]


class DubinsCar(ControlAffineSystem):
    """Машина Дубинса: состояние (px, py, theta), постоянная скорость, управление - скорость поворота"""

    name = "dubins_car"
    n_x = 3
    n_u = 1

    @property
    def speed(self) -> float:
        return float(self.params.get("speed", 0.5))

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        theta = x[..., 2]
        return np.stack([self.speed * np.cos(theta), self.speed * np.sin(theta), np.zeros_like(theta)], axis=-1)

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        b = np.array([[0.0], [0.0], [1.0]])
        return np.broadcast_to(b, x.shape[:-1] + b.shape)

    def measured_position(self, x):
        return np.asarray(x, dtype=float)[..., :2]


class TwoLinkArm(ControlAffineSystem):
    """
    Плоский двухзвенный манипулятор в вертикальной плоскости с грузом на конце.

    Состояние (q1, q2, dq1, dq2), управление - моменты (tau1, tau2) с пониженными пределами.
    Груз моделируется точечной массой на конце второго звена.
    """

    name = "two_link_arm"
    n_x = 4
    n_u = 2
    velocity_indices = (2, 3)

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        p = self.params
        self.l1 = float(p.get("l1", 1.0))
        self.l2 = float(p.get("l2", 1.0))
        self.m1 = float(p.get("m1", 1.0))
        m2 = float(p.get("m2", 1.0))
        lc2 = float(p.get("lc2", self.l2 / 2.0))
        i2 = float(p.get("i2", m2 * self.l2 ** 2 / 12.0))
        self.lc1 = float(p.get("lc1", self.l1 / 2.0))
        self.i1 = float(p.get("i1", self.m1 * self.l1 ** 2 / 12.0))
        self.payload = float(p.get("payload", 0.0))
        self.g = float(p.get("gravity", 9.81))
        self.damping = np.asarray(p.get("damping", [0.1, 0.1]), dtype=float)

        # Второе звено вместе с грузом: масса, центр масс и момент инерции относительно него
        self.m2 = m2 + self.payload
        self.lc2 = (m2 * lc2 + self.payload * self.l2) / self.m2
        self.i2 = i2 + m2 * (lc2 - self.lc2) ** 2 + self.payload * (self.l2 - self.lc2) ** 2

    def forward_kinematics(self, q: np.ndarray) -> np.ndarray:
        """Положение конца манипулятора (x, y) по углам суставов"""
        q = np.asarray(q, dtype=float)
        q1, q2 = q[..., 0], q[..., 1]
        return np.stack([
            self.l1 * np.cos(q1) + self.l2 * np.cos(q1 + q2),
            self.l1 * np.sin(q1) + self.l2 * np.sin(q1 + q2),
        ], axis=-1)

    def measured_position(self, x):
        return self.forward_kinematics(np.asarray(x, dtype=float)[..., :2])

    def mass_matrix(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Элементы M(q) = [[m11, m12], [m12, m22]]"""
        q2 = np.asarray(q, dtype=float)[..., 1]
        a = self.i1 + self.i2 + self.m1 * self.lc1 ** 2 + self.m2 * (self.l1 ** 2 + self.lc2 ** 2)
        b = self.m2 * self.l1 * self.lc2
        d = self.i2 + self.m2 * self.lc2 ** 2
        c2 = np.cos(q2)
        return a + 2.0 * b * c2, d + b * c2, np.full_like(c2, d)

    def gravity(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        q1, q2 = q[..., 0], q[..., 1]
        g2 = self.m2 * self.lc2 * self.g * np.cos(q1 + q2)
        g1 = (self.m1 * self.lc1 + self.m2 * self.l1) * self.g * np.cos(q1) + g2
        return np.stack([g1, g2], axis=-1)

    def _bias(self, x: np.ndarray) -> np.ndarray:
        """C(q, dq) dq + G(q) + D dq"""
        q2 = x[..., 1]
        dq1, dq2 = x[..., 2], x[..., 3]
        h = self.m2 * self.l1 * self.lc2 * np.sin(q2)
        coriolis = np.stack([-h * (2.0 * dq1 * dq2 + dq2 ** 2), h * dq1 ** 2], axis=-1)
        return coriolis + self.gravity(x[..., :2]) + self.damping * x[..., 2:]

    def _inverse_mass(self, q: np.ndarray) -> np.ndarray:
        m11, m12, m22 = self.mass_matrix(q)
        det = m11 * m22 - m12 ** 2
        row1 = np.stack([m22, -m12], axis=-1)
        row2 = np.stack([-m12, m11], axis=-1)
        return np.stack([row1, row2], axis=-2) / det[..., None, None]

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        m_inv = self._inverse_mass(x[..., :2])
        ddq = -np.einsum('...ij,...j->...i', m_inv, self._bias(x))
        return np.concatenate([x[..., 2:], ddq], axis=-1)

    def input_matrix(self, x):
        x = np.asarray(x, dtype=float)
        m_inv = self._inverse_mass(x[..., :2])
        zeros = np.zeros_like(m_inv)
        return np.concatenate([zeros, m_inv], axis=-2)

    def hold_control(self, x):
        """Компенсация гравитации, обрезанная по пределам моментов"""
        x = self._check_state(x)
        return self.controls.clip(self.gravity(x[..., :2]))


SYSTEM_REGISTRY = {
    Integrator1D.name: Integrator1D,
    DoubleIntegrator1D.name: DoubleIntegrator1D,
    PointMass2D.name: PointMass2D,
    DubinsCar.name: DubinsCar,
    TwoLinkArm.name: TwoLinkArm,
}
