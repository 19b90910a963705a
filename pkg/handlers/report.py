import logging
import os
import traceback
from typing import Any, Dict

from services.stats_service import build_report, normalized_metrics, summary_from_ledger, write_report

logger = logging.getLogger(__name__)


class ReportHandler:
    """Команда report: таблица сравнения по сводкам или по журналу результатов"""

    def report(self, args) -> Dict[str, Any]:
        if args.from_db is None:
            if not args.paths:
                return {"success": False, "message": "Укажите хотя бы одну сводку или --from-db"}
            return write_report(args.paths, args.out, args.normalized)

        try:
            summary = summary_from_ledger(args.from_db or None, args.run_id)
            report = build_report(summary)
            result = {"success": True, "text": report["text"], "message": f"Сводка из журнала: {len(summary)} строк"}
            if args.out:
                os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
                report["table"].to_csv(args.out, index=False)
                result["report_path"] = args.out
                if args.normalized:
                    norm_path = os.path.splitext(args.out)[0] + '_normalized.csv'
                    normalized_metrics(summary).to_csv(norm_path, index=False)
                    result["normalized_path"] = norm_path
            return result
        except Exception as e:
            logger.error(f"Ошибка при построении отчета из журнала: {e}")
            logger.error(traceback.format_exc())
            return {"success": False, "message": f"Ошибка при построении отчета из журнала: {e}"}
