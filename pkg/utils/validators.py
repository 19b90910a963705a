from typing import Any, Dict, List, Optional, Tuple

from systems.benchmarks import SYSTEM_REGISTRY

VALID_METHODS = ['vanilla', 'svmpc', 'filter']


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_vector(value: Any, length: Optional[int] = None) -> bool:
    if not isinstance(value, list) or not value:
        return False
    if length is not None and len(value) != length:
        return False
    return all(_is_number(v) for v in value)


def validate_axis_data(data: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
    """
    Проверка описания оси сетки

    Args:
        data: Словарь {"min", "max", "n", "periodic"?}

    Returns:
        Tuple[bool, Optional[str]]: (Успех, Сообщение об ошибке)
    """
    for key in ['min', 'max', 'n']:
        if key not in data:
            return False, f"Отсутствует обязательное поле оси: {key}"
        if not _is_number(data[key]):
            return False, f"Поле оси {key} должно быть числом"

    if not isinstance(data['n'], int) or data['n'] < 2:
        return False, "Число узлов оси n должно быть целым и не меньше 2"

    if data['max'] <= data['min']:
        return False, f"Для оси требуется max > min, получено [{data['min']}, {data['max']}]"

    if 'periodic' in data and not isinstance(data['periodic'], bool):
        return False, "Поле periodic должно быть логическим"

    return True, None


def validate_system_config(data: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
    """
    Проверка JSON-конфигурации системы

    Args:
        data: Словарь {"system", "params", "grid", "obstacle"?, "goal"?}

    Returns:
        Tuple[bool, Optional[str]]: (Успех, Сообщение об ошибке)
    """
    if 'system' not in data:
        return False, "Отсутствует обязательный раздел: system"

    system_cls = SYSTEM_REGISTRY.get(data['system'])
    if system_cls is None:
        return False, f"Неизвестная система: {data['system']}. Допустимые: {', '.join(sorted(SYSTEM_REGISTRY))}"

    params = data.get('params', {})
    if not isinstance(params, dict):
        return False, "Раздел params должен быть словарем"

    for key in ['u_lower', 'u_upper']:
        if not _is_vector(params.get(key), system_cls.n_u):
            return False, f"params.{key} должен быть списком из {system_cls.n_u} чисел"

    if any(lo >= hi for lo, hi in zip(params['u_lower'], params['u_upper'])):
        return False, "Для каждого управления требуется u_lower < u_upper"

    grid = data.get('grid')
    if not isinstance(grid, dict) or not isinstance(grid.get('axes'), list):
        return False, "Раздел grid.axes должен быть списком осей"

    if len(grid['axes']) != system_cls.n_x:
        return False, f"grid.axes должен содержать {system_cls.n_x} осей, получено {len(grid['axes'])}"

    for i, axis in enumerate(grid['axes']):
        axis_valid, axis_error = validate_axis_data(axis)
        if not axis_valid:
            return False, f"Ошибка в оси #{i + 1}: {axis_error}"

    if system_cls.requires_obstacle and 'obstacle' not in data:
        return False, f"Для системы {data['system']} требуется раздел obstacle"

    if 'goal' not in data:
        return False, "Отсутствует обязательный раздел: goal"

    if 'obstacle' in data:
        obstacle = data['obstacle']
        if not isinstance(obstacle, dict) or not _is_vector(obstacle.get('center')):
            return False, "obstacle.center должен быть непустым списком чисел"
        if not _is_number(obstacle.get('radius')) or obstacle['radius'] <= 0:
            return False, "obstacle.radius должен быть положительным числом"

    if 'goal' in data and not _is_vector(data['goal']):
        return False, "goal должен быть непустым списком чисел"

    return True, None


def validate_suite_config(data: Dict[str, Any]) -> Tuple[bool, Optional[str]]:
    """
    Проверка JSON-конфигурации набора бенчмарков

    Args:
        data: Словарь {"systems", "methods", "horizons", "n_trials", "seed", ...}

    Returns:
        Tuple[bool, Optional[str]]: (Успех, Сообщение об ошибке)
    """
    systems = data.get('systems')
    if not isinstance(systems, list) or not systems:
        return False, "Раздел systems должен быть непустым списком"

    for i, entry in enumerate(systems):
        if not isinstance(entry, dict) or 'config' not in entry:
            return False, f"Система #{i + 1}: отсутствует поле config"

    methods: List[str] = data.get('methods', VALID_METHODS)
    for method in methods:
        if method not in VALID_METHODS:
            return False, f"Недопустимый метод: {method}. Допустимые методы: {', '.join(VALID_METHODS)}"

    if any(method in ('svmpc', 'filter') for method in methods):
        for i, entry in enumerate(systems):
            if 'value_function' not in entry:
                return False, f"Система #{i + 1}: для методов svmpc/filter нужен value_function"

    horizons = data.get('horizons', [6, 8, 10, 12, 15])
    if not isinstance(horizons, list) or not horizons or not all(isinstance(h, int) and h >= 1 for h in horizons):
        return False, "horizons должен быть непустым списком положительных целых"

    n_trials = data.get('n_trials', 100)
    if not isinstance(n_trials, int) or n_trials < 0:
        return False, "n_trials должен быть неотрицательным целым"

    for key in ['task_seconds', 'dt', 'epsilon', 'gamma', 'trust_region', 'slack_penalty']:
        if key in data and (not _is_number(data[key]) or data[key] <= 0):
            return False, f"{key} должен быть положительным числом"

    # Настройки SCP можно переопределить для отдельной системы
    for i, entry in enumerate(systems):
        for key in ['trust_region', 'slack_penalty']:
            if key in entry and (not _is_number(entry[key]) or entry[key] <= 0):
                return False, f"Система #{i + 1}: {key} должен быть положительным числом"
        for source in (data, entry):
            iters = source.get('max_scp_iters', 15)
            if not isinstance(iters, int) or iters < 1:
                return False, "max_scp_iters должен быть положительным целым"

    task_seconds = data.get('task_seconds', 15.0)
    dt = data.get('dt', 0.04)
    if task_seconds < max(horizons) * dt:
        return False, "task_seconds должен быть не меньше h * dt для каждого горизонта"

    return True, None


def validate_state_vector(values: List[float], n_x: int) -> Tuple[bool, Optional[str]]:
    """Проверка начального состояния из командной строки"""
    if len(values) != n_x:
        return False, f"Состояние должно содержать {n_x} компонент, получено {len(values)}"
    return True, None
