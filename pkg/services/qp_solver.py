"""
Решатель выпуклых QP методом переменных направлений (ADMM, схема операторного расщепления):

    min 1/2 z^T P z + q^T z   при   lb <= A z <= ub

Перед итерациями данные уравновешиваются (Ruiz) и масштабируется стоимость; критерии остановки
проверяются по немасштабированным невязкам.
Редуцированная система (P + sigma I + A^T diag(rho) A) факторизуется плотно (n < 200) или разреженно,
rho периодически перемасштабируется, несовместность определяется по сертификатам на приращениях итераций.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from utils.errors import ContractViolationError, SolverError

logger = logging.getLogger(__name__)

SIGMA = 1e-6
ALPHA = 1.6
RHO_DEFAULT = 0.1
RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
RHO_UPDATE_INTERVAL = 25
# Порог изменения rho, при котором систему перефакторизуют
RHO_REFACTOR_RATIO = 5.0
EPS_INFEASIBLE = 1e-5
DENSE_LIMIT = 200

SCALING_ITERS = 10
SCALING_MIN = 1e-4
SCALING_MAX = 1e4


class QpStatus(str, Enum):
    SOLVED = "Solved"
    MAX_ITER = "MaxIter"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


@dataclass
class QpProblem:
    """Данные QP; P хранится полной симметричной матрицей"""

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = sp.csc_matrix(self.P, dtype=float)
        if self.A is None:
            self.A = sp.csc_matrix((0, n))
        self.A = sp.csc_matrix(self.A, dtype=float)
        m = self.A.shape[0]
        self.lb = np.full(m, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(m, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()

        if self.P.shape != (n, n):
            raise ContractViolationError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n:
            raise ContractViolationError(f"A has {self.A.shape[1]} columns, expected {n}")
        if self.lb.size != m or self.ub.size != m:
            raise ContractViolationError(f"Bounds have sizes {self.lb.size}/{self.ub.size}, A has {m} rows")
        if np.any(self.lb > self.ub):
            raise ContractViolationError("Constraint bounds require lb <= ub rowwise")

    @classmethod
    def from_triplets(cls, n: int, p_triplets: Sequence[Tuple[int, int, float]], q: np.ndarray,
                      m: int, a_triplets: Sequence[Tuple[int, int, float]],
                      lb: np.ndarray, ub: np.ndarray) -> "QpProblem":
        """Сборка из триплетов (строка, столбец, значение); для P задается верхний треугольник"""
        upper = _coo(n, n, p_triplets)
        if (upper.row > upper.col).any():
            raise ContractViolationError("P triplets must lie in the upper triangle")
        p_full = upper + upper.T - sp.diags(upper.diagonal())
        return cls(P=p_full, q=q, A=_coo(m, n, a_triplets), lb=lb, ub=ub)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


def _coo(rows: int, cols: int, triplets: Sequence[Tuple[int, int, float]]) -> sp.coo_matrix:
    if not triplets:
        return sp.coo_matrix((rows, cols))
    r, c, v = zip(*triplets)
    return sp.coo_matrix((v, (r, c)), shape=(rows, cols))


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: QpStatus
    iterations: int
    residuals: Tuple[float, float] = (np.inf, np.inf)
    info: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == QpStatus.SOLVED


class _ReducedSystem:
    """Факторизация P + sigma I + A^T diag(rho) A"""

    def __init__(self, problem: QpProblem, rho: np.ndarray):
        matrix = problem.P + SIGMA * sp.eye(problem.n, format='csc') + problem.A.T @ sp.diags(rho) @ problem.A
        self.dense = problem.n < DENSE_LIMIT
        try:
            if self.dense:
                self._factor = la.cho_factor(matrix.toarray())
            else:
                self._factor = spla.splu(sp.csc_matrix(matrix))
        except (la.LinAlgError, RuntimeError) as e:
            # Отрицательная кривизна: P не является PSD
            raise SolverError(f"Cannot factor the reduced QP system (is P positive semidefinite?): {e}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.dense:
            return la.cho_solve(self._factor, rhs)
        return self._factor.solve(rhs)


@dataclass
class _Scaling:
    """z = D z~, строки ограничений умножены на E, стоимость на c"""

    d: np.ndarray
    e: np.ndarray
    c: float = 1.0


def _column_norms(matrix: sp.csc_matrix, axis: int) -> np.ndarray:
    size = matrix.shape[1 - axis]
    if matrix.nnz == 0:
        return np.zeros(size)
    return np.asarray(abs(matrix).max(axis=axis).todense()).ravel()


def _clip_norms(norms: np.ndarray) -> np.ndarray:
    norms = np.where(norms < SCALING_MIN, 1.0, norms)
    return np.clip(norms, SCALING_MIN, SCALING_MAX)


def _equilibrate(problem: QpProblem, iterations: int) -> Tuple[QpProblem, _Scaling]:
    """Уравновешивание Ruiz по столбцам KKT-матрицы [[P, A^T], [A, 0]] в max-норме и масштаб стоимости"""
    n, m = problem.n, problem.m
    scaling = _Scaling(d=np.ones(n), e=np.ones(m))
    if iterations <= 0:
        return problem, scaling

    p_matrix, a_matrix = problem.P, problem.A
    for _ in range(iterations):
        col_norms = np.maximum(_column_norms(p_matrix, 0), _column_norms(a_matrix, 0) if m else 0.0)
        delta_d = 1.0 / np.sqrt(_clip_norms(col_norms))
        delta_e = 1.0 / np.sqrt(_clip_norms(_column_norms(a_matrix, 1))) if m else np.ones(0)
        p_matrix = sp.diags(delta_d) @ p_matrix @ sp.diags(delta_d)
        a_matrix = sp.diags(delta_e) @ a_matrix @ sp.diags(delta_d) if m else a_matrix
        scaling.d *= delta_d
        scaling.e *= delta_e

    q = scaling.d * problem.q
    cost_norm = max(float(np.mean(_column_norms(p_matrix, 0))) if n else 0.0,
                    float(np.linalg.norm(q, np.inf)) if n else 0.0)
    scaling.c = 1.0 / float(_clip_norms(np.array([cost_norm]))[0])

    scaled = QpProblem(P=scaling.c * p_matrix, q=scaling.c * q, A=a_matrix,
                       lb=scaling.e * problem.lb, ub=scaling.e * problem.ub)
    return scaled, scaling


def _initial_rho(problem: QpProblem) -> np.ndarray:
    rho = np.full(problem.m, RHO_DEFAULT)
    free = np.isinf(problem.lb) & np.isinf(problem.ub)
    equality = problem.ub - problem.lb < 1e-10
    rho[free] = RHO_MIN
    rho[equality] = RHO_DEFAULT * RHO_EQ_SCALE
    return rho


def _is_primal_infeasible(problem: QpProblem, delta_y: np.ndarray) -> bool:
    norm = np.linalg.norm(delta_y, np.inf)
    if norm <= EPS_INFEASIBLE:
        return False
    v = delta_y / norm
    positive = np.maximum(v, 0.0)
    negative = np.minimum(v, 0.0)
    # Направление, упирающееся в бесконечную границу, сертификатом не является
    if np.any((positive > EPS_INFEASIBLE) & np.isinf(problem.ub)):
        return False
    if np.any((negative < -EPS_INFEASIBLE) & np.isinf(problem.lb)):
        return False
    ub = np.where(np.isinf(problem.ub), 0.0, problem.ub)
    lb = np.where(np.isinf(problem.lb), 0.0, problem.lb)
    if ub @ positive + lb @ negative >= -EPS_INFEASIBLE:
        return False
    return np.linalg.norm(problem.A.T @ v, np.inf) < EPS_INFEASIBLE


def _is_dual_infeasible(problem: QpProblem, delta_z: np.ndarray) -> bool:
    norm = np.linalg.norm(delta_z, np.inf)
    if norm <= EPS_INFEASIBLE:
        return False
    v = delta_z / norm
    if problem.q @ v >= -EPS_INFEASIBLE:
        return False
    if np.linalg.norm(problem.P @ v, np.inf) >= EPS_INFEASIBLE:
        return False
    av = problem.A @ v
    upper_ok = np.isinf(problem.ub) | (av <= EPS_INFEASIBLE)
    lower_ok = np.isinf(problem.lb) | (av >= -EPS_INFEASIBLE)
    return bool(np.all(upper_ok & lower_ok))


def _polish(problem: QpProblem, z: np.ndarray, y: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Точное решение KKT-системы на угаданном активном множестве"""
    if problem.n + problem.m > 2 * DENSE_LIMIT:
        return None
    az = problem.A @ z
    lower_active = az - problem.lb < -y
    upper_active = problem.ub - az < y
    active = np.flatnonzero(lower_active | upper_active)
    targets = np.where(upper_active, problem.ub, problem.lb)[active]

    a_active = problem.A[active].toarray()
    n = problem.n
    k = active.size
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = problem.P.toarray()
    kkt[:n, n:] = a_active.T
    kkt[n:, :n] = a_active
    rhs = np.concatenate([-problem.q, targets])
    solution = la.lstsq(kkt, rhs)[0]

    z_pol = solution[:n]
    y_pol = np.zeros(problem.m)
    y_pol[active] = solution[n:]
    return z_pol, y_pol


def _norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v, np.inf)) if v.size else 0.0


def _residuals(az: np.ndarray, s: np.ndarray, pz: np.ndarray, aty: np.ndarray, q: np.ndarray,
               row_scale: np.ndarray, col_scale: np.ndarray, cost_scale: float):
    """Невязки и их масштабы в max-норме; row_scale, col_scale и cost_scale снимают масштабирование"""
    primal = _norm((az - s) / row_scale)
    primal_scale = max(_norm(az / row_scale), _norm(s / row_scale))
    dual = _norm((pz + q + aty) / col_scale) / cost_scale
    dual_scale = max(_norm(pz / col_scale), _norm(aty / col_scale), _norm(q / col_scale)) / cost_scale
    return primal, dual, primal_scale, dual_scale


def solve_qp(problem: QpProblem, warm: Optional[QpSolution] = None, eps_abs: float = 1e-6,
             eps_rel: float = 1e-6, max_iter: int = 20000, scaling: int = SCALING_ITERS) -> QpSolution:
    """
    Решение QP итерациями ADMM.

    Args:
        problem: Задача
        warm: Предыдущее решение для теплого старта (игнорируется при несовпадении размеров)
        eps_abs: Абсолютная точность невязок
        eps_rel: Относительная точность невязок
        max_iter: Предел числа итераций
        scaling: Число проходов уравновешивания (0 - без масштабирования)

    Returns:
        QpSolution: Решение со статусом Solved / MaxIter / PrimalInfeasible / DualInfeasible
    """
    n, m = problem.n, problem.m
    scaled, scale = _equilibrate(problem, scaling)
    ones_n, ones_m = np.ones(n), np.ones(m)

    z = np.zeros(n)
    y = np.zeros(m)
    if warm is not None and warm.z.shape == (n,) and warm.y.shape == (m,):
        z = np.asarray(warm.z, dtype=float) / scale.d
        y = scale.c * np.asarray(warm.y, dtype=float) / scale.e
    elif warm is not None:
        logger.debug(f"Warm start ignored: dimensions {warm.z.shape}/{warm.y.shape} vs {(n,)}/{(m,)}")

    # Малые задачи итерируются на плотных матрицах
    if n < DENSE_LIMIT:
        p_op, a_op = scaled.P.toarray(), scaled.A.toarray()
    else:
        p_op, a_op = scaled.P, scaled.A
    at_op = a_op.T
    q, lb, ub = scaled.q, scaled.lb, scaled.ub
    s = np.clip(a_op @ z, lb, ub)

    rho = _initial_rho(scaled)
    system = _ReducedSystem(scaled, rho)
    status = QpStatus.MAX_ITER
    primal = dual = np.inf
    iteration = 0

    for iteration in range(1, max_iter + 1):
        z_prev, y_prev = z, y

        rhs = SIGMA * z - q + at_op @ (rho * s - y)
        z_tilde = system.solve(rhs)
        s_tilde = a_op @ z_tilde

        z = ALPHA * z_tilde + (1.0 - ALPHA) * z_prev
        s_relaxed = ALPHA * s_tilde + (1.0 - ALPHA) * s
        s_new = np.clip(s_relaxed + y / rho, lb, ub)
        y = y + rho * (s_relaxed - s_new)
        s = s_new

        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise SolverError(f"QP iterate became non-finite at iteration {iteration}")

        az, pz, aty = a_op @ z, p_op @ z, at_op @ y
        primal, dual, primal_scale, dual_scale = _residuals(az, s, pz, aty, q, scale.e, scale.d, scale.c)
        if primal <= eps_abs + eps_rel * primal_scale and dual <= eps_abs + eps_rel * dual_scale:
            status = QpStatus.SOLVED
            break

        if m and _is_primal_infeasible(scaled, y - y_prev):
            status = QpStatus.PRIMAL_INFEASIBLE
            break
        if _is_dual_infeasible(scaled, z - z_prev):
            status = QpStatus.DUAL_INFEASIBLE
            break

        if m and iteration % RHO_UPDATE_INTERVAL == 0:
            s_primal, s_dual, s_primal_scale, s_dual_scale = _residuals(az, s, pz, aty, q, ones_m, ones_n, 1.0)
            ratio = np.sqrt((s_primal / max(s_primal_scale, 1e-12)) / max(s_dual / max(s_dual_scale, 1e-12), 1e-12))
            if ratio > RHO_REFACTOR_RATIO or ratio < 1.0 / RHO_REFACTOR_RATIO:
                rho = np.clip(rho * ratio, RHO_MIN, RHO_MAX)
                system = _ReducedSystem(scaled, rho)

    z = scale.d * z
    y = scale.e * y / scale.c

    polished = False
    if status == QpStatus.SOLVED:
        candidate = _polish(problem, z, y)
        if candidate is not None:
            z_pol, y_pol = candidate
            p_res, d_res, _ = kkt_residuals(problem, QpSolution(z_pol, y_pol, status, iteration))
            sign_ok = _dual_signs_consistent(problem, z_pol, y_pol, eps_abs)
            if sign_ok and p_res <= max(primal, eps_abs) and d_res <= max(dual, eps_abs):
                z, y = z_pol, y_pol
                primal, dual = p_res, d_res
                polished = True

    logger.debug(f"QP n={n} m={m}: {status.value} after {iteration} iterations "
                 f"(primal={primal:.2e}, dual={dual:.2e}, polished={polished})")
    return QpSolution(z=z, y=y, status=status, iterations=iteration, residuals=(primal, dual),
                      info={"polished": polished, "cost_scale": scale.c})


def _dual_signs_consistent(problem: QpProblem, z: np.ndarray, y: np.ndarray, tol: float) -> bool:
    az = problem.A @ z
    slack = 10.0 * tol
    upper_ok = (y <= slack) | (az >= problem.ub - slack)
    lower_ok = (y >= -slack) | (az <= problem.lb + slack)
    return bool(np.all(upper_ok & lower_ok))


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> Tuple[float, float, float]:
    """
    Невязки условий ККТ в max-норме.

    Returns:
        Tuple[float, float, float]: (допустимость, стационарность, дополняющая нежесткость)
    """
    z, y = sol.z, sol.y
    az = problem.A @ z
    primal = 0.0
    if problem.m:
        primal = float(np.max(np.maximum(np.maximum(problem.lb - az, az - problem.ub), 0.0)))
    dual = float(np.linalg.norm(problem.P @ z + problem.q + problem.A.T @ y, np.inf))

    complementarity = 0.0
    if problem.m:
        y_plus = np.maximum(y, 0.0)
        y_minus = np.maximum(-y, 0.0)
        # Множитель у бесконечной границы сам по себе нарушает дополняющую нежесткость
        upper_gap = np.where(np.isinf(problem.ub), 1.0, np.abs(problem.ub - az))
        lower_gap = np.where(np.isinf(problem.lb), 1.0, np.abs(az - problem.lb))
        complementarity = float(max(np.max(y_plus * upper_gap), np.max(y_minus * lower_gap)))
    return primal, dual, complementarity
