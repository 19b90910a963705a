import os
from dotenv import load_dotenv

# Загружаем переменные окружения из .env файла
load_dotenv()

# Уровень логирования для CLI
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

# Пути к файлам - используем os.path для корректной работы на всех платформах
DATA_DIR = os.getenv('DATA_DIR', 'data')
SYSTEMS_DIR = os.getenv('SYSTEMS_DIR', os.path.join(DATA_DIR, 'systems'))
SUITES_DIR = os.getenv('SUITES_DIR', os.path.join(DATA_DIR, 'suites'))
RESULTS_DIR = os.getenv('RESULTS_DIR', 'results')

# Журнал результатов бенчмарка (SQLite по умолчанию, PostgreSQL через переменную окружения)
results_db_path = os.path.join(RESULTS_DIR, 'results.db')
RESULTS_DB_ENGINE = os.getenv('RESULTS_DB_ENGINE', f'sqlite:///{results_db_path}')

# Значения по умолчанию для эксперимента
DEFAULT_EPSILON = float(os.getenv('DEFAULT_EPSILON', '0.05'))
DEFAULT_GAMMA = float(os.getenv('DEFAULT_GAMMA', '1.0'))


def ensure_directories():
    """Создание рабочих директорий, если их нет"""
    for directory in [DATA_DIR, SYSTEMS_DIR, SUITES_DIR, RESULTS_DIR]:
        os.makedirs(directory, exist_ok=True)


def resolve_workers(cli_workers):
    """Итоговое число воркеров; SAFETY_HORIZON_WORKERS важнее флага --workers"""
    workers_env = os.getenv('SAFETY_HORIZON_WORKERS', '').strip()
    if workers_env.isdigit() and int(workers_env) > 0:
        return int(workers_env)
    if cli_workers is None or cli_workers < 1:
        return 1
    return int(cli_workers)
