import logging
import traceback
from typing import Any, Dict

from config import resolve_workers
from services.bench_service import load_suite, run_benchmark

logger = logging.getLogger(__name__)


class BenchHandler:
    """Команда bench: полный набор испытаний по конфигурации"""

    def bench(self, args) -> Dict[str, Any]:
        try:
            suite = load_suite(args.config)
            workers = resolve_workers(args.workers)
            return run_benchmark(suite, args.out, workers=workers, use_ledger=not args.no_ledger)
        except Exception as e:
            logger.error(f"Ошибка при запуске бенчмарка: {e}")
            logger.error(traceback.format_exc())
            return {"success": False, "message": f"Ошибка при запуске бенчмарка: {e}"}
