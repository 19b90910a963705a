"""
Бинарный формат сеточного поля.

Строка 1 - JSON-заголовок {"version": 1, "system": name, "axes": [{"min", "max", "n"}, ...]} и перевод строки,
далее сырые little-endian float64 в порядке row-major (последняя ось быстрее всего).
"""

import json
import logging
import os
from typing import Tuple

import numpy as np

from grid.field import AxisSpec, GridField
from utils.errors import ContractViolationError, ValueFunctionFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPE = np.dtype('<f8')


def write_field(path: str, field: GridField, system_name: str) -> None:
    """Запись поля в файл (заголовок + полезная нагрузка)"""
    header = {
        "version": FORMAT_VERSION,
        "system": system_name,
        "axes": [axis.to_dict() for axis in field.axes],
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(json.dumps(header).encode('utf-8') + b'\n')
        f.write(np.ascontiguousarray(field.flat_values, dtype=_DTYPE).tobytes())
    logger.info(f"Field {field.shape} for {system_name} written to {path}")


def read_field(path: str) -> Tuple[GridField, str]:
    """
    Чтение поля из файла.

    Returns:
        Tuple[GridField, str]: Поле и имя системы из заголовка

    Raises:
        ValueFunctionFormatError: поврежденный заголовок, неверная версия или длина полезной нагрузки
    """
    with open(path, 'rb') as f:
        header_line = f.readline()
        payload = f.read()

    if not header_line.endswith(b'\n'):
        raise ValueFunctionFormatError(f"{path}: header is not newline-terminated")
    try:
        header = json.loads(header_line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueFunctionFormatError(f"{path}: cannot parse header: {e}")

    if header.get("version") != FORMAT_VERSION:
        raise ValueFunctionFormatError(f"{path}: unsupported version {header.get('version')}")
    try:
        axes = [AxisSpec.from_dict(a) for a in header["axes"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ValueFunctionFormatError(f"{path}: invalid axes in header: {e}")

    expected = int(np.prod([a.n for a in axes])) * _DTYPE.itemsize
    if len(payload) != expected:
        raise ValueFunctionFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")

    values = np.frombuffer(payload, dtype=_DTYPE).astype(np.float64)
    try:
        field = GridField(axes, values)
    except ContractViolationError as e:
        raise ValueFunctionFormatError(f"{path}: {e}")
    return field, str(header.get("system", ""))
