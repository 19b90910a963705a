import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, List, Sequence, Tuple

import numpy as np

from utils.errors import ContractViolationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AxisSpec:
    """
    Ось прямоугольной сетки: n узлов равномерно на [min, max].

    Для периодической оси первый и последний узлы совпадают (max - min - период).
    """

    min: float
    max: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if int(self.n) < 2:
            raise ContractViolationError(f"Axis needs at least 2 nodes, got {self.n}")
        if not self.max > self.min:
            raise ContractViolationError(f"Axis requires max > min, got [{self.min}, {self.max}]")
        object.__setattr__(self, 'min', float(self.min))
        object.__setattr__(self, 'max', float(self.max))
        object.__setattr__(self, 'n', int(self.n))
        object.__setattr__(self, 'periodic', bool(self.periodic))

    @property
    def spacing(self) -> float:
        return (self.max - self.min) / (self.n - 1)

    @property
    def coordinates(self) -> np.ndarray:
        return np.linspace(self.min, self.max, self.n)

    def to_dict(self) -> dict:
        data = {"min": self.min, "max": self.max, "n": self.n}
        if self.periodic:
            data["periodic"] = True
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AxisSpec":
        return cls(min=data["min"], max=data["max"], n=data["n"], periodic=data.get("periodic", False))


class GridField:
    """
    Скалярное поле на прямоугольной сетке: значения в узлах, мультилинейная интерполяция,
    интерполяция предвычисленных узловых градиентов.

    Значения хранятся в порядке row-major (последняя ось меняется быстрее всего).
    Объект не изменяется после конструирования.
    """

    def __init__(self, axes: Sequence[AxisSpec], values: np.ndarray):
        self.axes: List[AxisSpec] = list(axes)
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(self.shape)):
            raise ContractViolationError(
                f"Field has {values.size} values, grid has {int(np.prod(self.shape))} nodes")
        if not np.all(np.isfinite(values)):
            raise ContractViolationError("Field values must be finite")
        self._values = values.reshape(self.shape).copy()
        self._values.setflags(write=False)

    @classmethod
    def from_function(cls, axes: Sequence[AxisSpec], fn: Callable[[np.ndarray], np.ndarray]) -> "GridField":
        """Поле, заданное функцией от пачки узловых координат (N, d) -> (N,)"""
        field = cls(axes, np.zeros(int(np.prod([a.n for a in axes]))))
        return cls(axes, fn(field.node_points()))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.n for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a.spacing for a in self.axes])

    @property
    def values(self) -> np.ndarray:
        """Узловые значения, форма shape (только чтение)"""
        return self._values

    @property
    def flat_values(self) -> np.ndarray:
        return self._values.ravel()

    @property
    def lower(self) -> np.ndarray:
        return np.array([a.min for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a.max for a in self.axes])

    def node_points(self) -> np.ndarray:
        """Координаты всех узлов в порядке row-major, массив (N, d)"""
        mesh = np.meshgrid(*[a.coordinates for a in self.axes], indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def for_each_node(self) -> Iterator[Tuple[Tuple[int, ...], np.ndarray]]:
        """Обход всех узлов ровно по одному разу в детерминированном порядке row-major"""
        coords = [a.coordinates for a in self.axes]
        for index in np.ndindex(*self.shape):
            yield index, np.array([c[i] for c, i in zip(coords, index)])

    # ---------------------------
    # Интерполяция
    # ---------------------------

    def _check_points(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.ndim,):
            raise ContractViolationError(f"Query must have last dimension {self.ndim}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractViolationError("Query point must be finite")
        return x

    def is_clamped(self, x: np.ndarray) -> np.ndarray:
        """True, если точка вне области по непериодическим осям (запрос будет прижат к границе)"""
        x = self._check_points(x)
        outside = np.zeros(x.shape[:-1], dtype=bool)
        for i, axis in enumerate(self.axes):
            if not axis.periodic:
                outside |= (x[..., i] < axis.min) | (x[..., i] > axis.max)
        return outside

    def _cell_weights(self, x: np.ndarray):
        """Индексы левых узлов ячеек и дробные доли по каждой оси"""
        lower_idx = []
        fractions = []
        for i, axis in enumerate(self.axes):
            t = (x[..., i] - axis.min) / axis.spacing
            if axis.periodic:
                t = np.mod(t, axis.n - 1)
            else:
                t = np.clip(t, 0.0, axis.n - 1)
            i0 = np.minimum(np.floor(t).astype(np.int64), axis.n - 2)
            lower_idx.append(i0)
            fractions.append(t - i0)
        return lower_idx, fractions

    def _interpolate_array(self, data: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Мультилинейная интерполяция массива data формы shape + extra по 2^d окружающим узлам"""
        lower_idx, fractions = self._cell_weights(x)
        extra = data.shape[self.ndim:]
        flat = data.reshape((-1,) + extra)
        result = np.zeros(x.shape[:-1] + extra)
        for corner in range(1 << self.ndim):
            weight = np.ones(x.shape[:-1])
            index = []
            for i in range(self.ndim):
                bit = (corner >> i) & 1
                index.append(lower_idx[i] + bit)
                weight = weight * (fractions[i] if bit else 1.0 - fractions[i])
            linear = np.ravel_multi_index(tuple(index), self.shape)
            result = result + weight.reshape(weight.shape + (1,) * len(extra)) * flat[linear]
        return result

    def interpolate(self, x: np.ndarray):
        """
        Значение поля в точке (или пачке точек) с мультилинейной интерполяцией.

        Точки вне области прижимаются к границе; факт прижатия возвращает is_clamped.
        """
        x = self._check_points(x)
        value = self._interpolate_array(self._values, x)
        return float(value) if x.ndim == 1 else value

    # ---------------------------
    # Градиенты
    # ---------------------------

    @cached_property
    def node_gradients(self) -> np.ndarray:
        """Центральные разности в узлах (односторонние на границе), форма shape + (d,)"""
        grads = []
        for i, axis in enumerate(self.axes):
            if axis.periodic:
                # Последний узел дублирует первый; разности считаем по уникальным узлам
                unique = np.take(self._values, np.arange(axis.n - 1), axis=i)
                diff = (np.roll(unique, -1, axis=i) - np.roll(unique, 1, axis=i)) / (2.0 * axis.spacing)
                first = np.take(diff, [0], axis=i)
                grads.append(np.concatenate([diff, first], axis=i))
            else:
                grads.append(np.gradient(self._values, axis.spacing, axis=i, edge_order=1))
        return np.stack(grads, axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Градиент поля: мультилинейная интерполяция узловых градиентов (непрерывен между ячейками)"""
        x = self._check_points(x)
        return self._interpolate_array(self.node_gradients, x)

    def __repr__(self) -> str:
        return f"GridField(shape={self.shape})"
