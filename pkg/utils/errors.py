class SafetyHorizonError(Exception):
    """Базовое исключение проекта"""


class ContractViolationError(SafetyHorizonError, ValueError):
    """Нарушены размерности или предусловия операции"""


class IntegrationError(SafetyHorizonError, ArithmeticError):
    """Шаг интегратора дал нечисловой результат (разлет динамики)"""


class DegenerateDynamicsError(SafetyHorizonError):
    """Все коэффициенты диссипации Лакса-Фридрихса равны нулю"""


class SolverError(SafetyHorizonError):
    """Численный решатель попал в недопустимое состояние"""


class RefusalError(SafetyHorizonError):
    """Перебор превышает допустимый бюджет"""


class ConfigurationError(SafetyHorizonError, ValueError):
    """Некорректная конфигурация системы, набора или сэмплера"""


class ValueFunctionFormatError(SafetyHorizonError, IOError):
    """Файл функции ценности поврежден или имеет неверную версию"""
