import logging
import os
import traceback
from contextlib import contextmanager
from typing import Dict, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker

from config import RESULTS_DB_ENGINE
from database.models import Base

# Настройка логирования
logger = logging.getLogger(__name__)

# Движки и фабрики сессий по URL базы
_engines: Dict[str, Engine] = {}
_session_factories: Dict[str, sessionmaker] = {}


def _is_sqlite(url: str) -> bool:
    return url.startswith('sqlite:///')


def get_engine(url: Optional[str] = None) -> Engine:
    """Движок для указанного URL (по умолчанию RESULTS_DB_ENGINE), создается один раз"""
    url = url or RESULTS_DB_ENGINE
    if url in _engines:
        return _engines[url]

    if _is_sqlite(url):
        # Для SQLite создаем директорию, если она не существует
        sqlite_path = url.replace('sqlite:///', '')
        os.makedirs(os.path.dirname(os.path.abspath(sqlite_path)), exist_ok=True)
        engine = create_engine(
            url,
            connect_args={"check_same_thread": False},  # Только для SQLite
            echo=False
        )
    # Для PostgreSQL или других СУБД
    else:
        engine = create_engine(
            url,
            echo=False,
            pool_size=5,
            max_overflow=10,
            pool_recycle=900,  # Пересоздание соединений старше 15 минут
            pool_pre_ping=True  # Проверка соединения перед использованием
        )

    _engines[url] = engine
    _session_factories[url] = sessionmaker(bind=engine, autoflush=True, autocommit=False)
    return engine


def init_db(url: Optional[str] = None):
    """Создание таблиц журнала результатов"""
    url = url or RESULTS_DB_ENGINE
    try:
        engine = get_engine(url)
        if _is_sqlite(url):
            logger.info(f"Results ledger (SQLite): {url.replace('sqlite:///', '')}")
        else:
            logger.info(f"Results ledger: {engine.url.render_as_string(hide_password=True)}")

        Base.metadata.create_all(engine)
        logger.info("Results ledger tables are ready")
    except Exception as e:
        logger.error(f"Ошибка инициализации базы данных: {e}")
        logger.error(traceback.format_exc())
        raise


@contextmanager
def get_session(url: Optional[str] = None):
    """Контекстный менеджер для работы с сессией базы данных"""
    url = url or RESULTS_DB_ENGINE
    get_engine(url)
    session = _session_factories[url]()
    try:
        yield session
        if session.is_active:
            session.commit()
    except Exception as e:
        if session.is_active:
            session.rollback()
            logger.error(f"Ошибка в сессии базы данных, выполнен rollback: {e}")
        logger.error(traceback.format_exc())
        raise
    finally:
        session.close()
