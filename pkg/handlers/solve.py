import logging
import traceback
from typing import Any, Dict

from config import DEFAULT_EPSILON
from services.bench_service import save_value_function
from services.reachability_service import HjbConfig, solve_converged
from systems.loader import load_system
from utils.formatters import format_solve_report

logger = logging.getLogger(__name__)


class SolveValueHandler:
    """Команда solve-value: расчет функции ценности безопасности на сетке системы"""

    def solve_value(self, args) -> Dict[str, Any]:
        try:
            system = load_system(args.system)
            config = HjbConfig(cfl=args.cfl, convergence_tol=args.tol, max_steps=args.max_steps)
            epsilon = args.epsilon if args.epsilon is not None else DEFAULT_EPSILON

            value_fn = solve_converged(system, config=config, epsilon_default=epsilon)
            value_fn.provenance['safe_volume_fraction'] = value_fn.safe_volume_fraction()
            value_fn.provenance['max_violation_of_upper_bound'] = value_fn.max_violation_of_upper_bound(system)
            sidecar = save_value_function(value_fn, args.out)

            return {
                "success": True,
                "message": format_solve_report(value_fn.provenance),
                "value_function": args.out,
                "report": sidecar,
                "converged": value_fn.provenance['converged'],
            }
        except Exception as e:
            logger.error(f"Ошибка при расчете функции ценности: {e}")
            logger.error(traceback.format_exc())
            return {"success": False, "message": f"Ошибка при расчете функции ценности: {e}"}
