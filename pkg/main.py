import argparse
import logging
import sys
import traceback
from typing import List, Optional

from config import LOG_LEVEL, ensure_directories
from handlers.bench import BenchHandler
from handlers.report import ReportHandler
from handlers.solve import SolveValueHandler
from handlers.trial import TrialHandler
from utils.validators import VALID_METHODS

# Настройка логирования
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=LOG_LEVEL
)

logger = logging.getLogger(__name__)


class SafetyHorizonApp:
    def __init__(self):
        # Обработчики
        self.solve_handler = SolveValueHandler()
        self.trial_handler = TrialHandler()
        self.bench_handler = BenchHandler()
        self.report_handler = ReportHandler()

        self.parser = self._build_parser()

    def _build_parser(self) -> argparse.ArgumentParser:
        """Регистрация подкоманд"""
        parser = argparse.ArgumentParser(
            prog='safety-horizon',
            description='Safety value functions, Safety Value MPC and closed-loop benchmarks')
        subparsers = parser.add_subparsers(dest='command', required=True)

        solve = subparsers.add_parser('solve-value', help='solve the HJB variational inequality on a grid')
        solve.add_argument('--system', required=True, help='system config JSON')
        solve.add_argument('--out', required=True, help='output value function file')
        solve.add_argument('--cfl', type=float, default=0.5)
        solve.add_argument('--tol', type=float, default=1e-4)
        solve.add_argument('--max-steps', type=int, default=20000)
        solve.add_argument('--epsilon', type=float, default=None, help='terminal buffer stored with the result')
        solve.set_defaults(handler=self.solve_handler.solve_value)

        run = subparsers.add_parser('run', help='single closed-loop trial')
        run.add_argument('--system', required=True)
        run.add_argument('--method', required=True, choices=VALID_METHODS)
        run.add_argument('--vf', default=None, help='value function file (svmpc, filter)')
        run.add_argument('--x0', required=True, help='initial state, comma separated')
        run.add_argument('--horizon', type=int, required=True)
        run.add_argument('--task-seconds', type=float, default=15.0)
        run.add_argument('--dt', type=float, default=0.04)
        run.add_argument('--control-horizon', type=int, default=1)
        run.add_argument('--gamma', type=float, default=None)
        run.add_argument('--epsilon', type=float, default=None)
        run.add_argument('--out', default=None, help='per-step CSV path')
        run.set_defaults(handler=self.trial_handler.run)

        bench = subparsers.add_parser('bench', help='benchmark suite')
        bench.add_argument('--config', required=True, help='suite config JSON')
        bench.add_argument('--out', required=True, help='output directory')
        bench.add_argument('--workers', type=int, default=1)
        bench.add_argument('--no-ledger', action='store_true', help='do not write the results ledger')
        bench.set_defaults(handler=self.bench_handler.bench)

        report = subparsers.add_parser('report', help='comparison table from benchmark summaries')
        report.add_argument('paths', nargs='*', help='summary.csv files or benchmark directories')
        report.add_argument('--out', default=None, help='report CSV path')
        report.add_argument('--normalized', action='store_true', help='also write per-horizon normalized metrics')
        report.add_argument('--from-db', nargs='?', const='', default=None,
                            help='rebuild from the results ledger (optional database URL)')
        report.add_argument('--run-id', type=int, default=None)
        report.set_defaults(handler=self.report_handler.report)

        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Разбор аргументов и вызов обработчика; код возврата 0 при успехе"""
        args = self.parser.parse_args(argv)
        try:
            ensure_directories()
            result = args.handler(args)
        except Exception as e:
            logger.error(f"Error during command execution: {e}")
            logger.error(traceback.format_exc())
            return 1

        if result.get("text"):
            print(result["text"])
        if result.get("message"):
            print(result["message"])
        return 0 if result.get("success") else 1


def main():
    app = SafetyHorizonApp()
    sys.exit(app.run())


if __name__ == '__main__':
    main()
