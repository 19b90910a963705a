import json
import logging
import os
from typing import Any, Dict

from grid.field import AxisSpec
from systems.base import ControlAffineSystem, ControlBox, CostWeights, Obstacle
from systems.benchmarks import SYSTEM_REGISTRY
from utils.errors import ConfigurationError
from utils.validators import validate_system_config

logger = logging.getLogger(__name__)


def load_system_config(path: str) -> Dict[str, Any]:
    """Чтение и проверка JSON-конфигурации системы"""
    if not os.path.exists(path):
        raise ConfigurationError(f"System config not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}")

    is_valid, error = validate_system_config(data)
    if not is_valid:
        raise ConfigurationError(f"{path}: {error}")
    return data


def build_system(data: Dict[str, Any]) -> ControlAffineSystem:
    """Создание системы из уже проверенной конфигурации"""
    is_valid, error = validate_system_config(data)
    if not is_valid:
        raise ConfigurationError(error)

    system_cls = SYSTEM_REGISTRY[data['system']]
    params = dict(data.get('params', {}))
    controls = ControlBox(params.pop('u_lower'), params.pop('u_upper'))
    weights = CostWeights(w_u=float(params.pop('w_u', 1e-2)), w_v=float(params.pop('w_v', 1e-2)))

    obstacle = None
    if 'obstacle' in data:
        obstacle = Obstacle(center=data['obstacle']['center'], radius=float(data['obstacle']['radius']))

    axes = [AxisSpec.from_dict(axis) for axis in data['grid']['axes']]
    system = system_cls(controls, goal=data.get('goal'), obstacle=obstacle, weights=weights,
                        grid_axes=axes, params=params)
    logger.debug(f"Built {system}")
    return system


def load_system(path: str) -> ControlAffineSystem:
    """Загрузка системы по пути к JSON-конфигурации"""
    return build_system(load_system_config(path))
