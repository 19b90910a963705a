import logging
import os
import traceback
from typing import Any, Dict

import numpy as np

from config import DEFAULT_EPSILON, DEFAULT_GAMMA, RESULTS_DIR
from services.bench_service import TrialConfig, load_value_function, run_trial
from systems.loader import load_system
from utils.validators import validate_state_vector

logger = logging.getLogger(__name__)


def parse_state(text: str):
    """Состояние из строки вида "0.5,-0.2,0,0" """
    return [float(v) for v in text.replace(';', ',').split(',') if v.strip()]


class TrialHandler:
    """Команда run: одно замкнутое испытание с пошаговым CSV"""

    def run(self, args) -> Dict[str, Any]:
        try:
            system = load_system(args.system)
            x0 = parse_state(args.x0)
            is_valid, error = validate_state_vector(x0, system.n_x)
            if not is_valid:
                return {"success": False, "message": error}

            config = TrialConfig(
                system_config=args.system,
                method=args.method,
                h=args.horizon,
                task_seconds=args.task_seconds,
                dt=args.dt,
                value_function=args.vf,
                epsilon=args.epsilon if args.epsilon is not None else DEFAULT_EPSILON,
                gamma=args.gamma if args.gamma is not None else DEFAULT_GAMMA,
                control_horizon=args.control_horizon,
            )
            value_fn = load_value_function(args.vf) if args.vf else None
            result = run_trial(config, np.array(x0), system=system, value_fn=value_fn)

            out = args.out or os.path.join(RESULTS_DIR, f"run_{system.name}_{args.method}_h{args.horizon}.csv")
            result.to_csv(out)

            min_l = float(np.min(result.constraint_values)) if result.constraint_values.size else float('nan')
            status = "безопасно" if result.safe else "столкновение"
            message = (f"{system.name}/{args.method}/h={args.horizon}: {status}, min l = {min_l:.4f}, "
                       f"шагов {len(result.steps)}, неудачных планирований {result.failed_steps}")
            if result.error:
                message += f", прервано: {result.error}"
            return {"success": True, "message": message, "csv_path": out, "safe": result.safe}
        except Exception as e:
            logger.error(f"Ошибка при выполнении испытания: {e}")
            logger.error(traceback.format_exc())
            return {"success": False, "message": f"Ошибка при выполнении испытания: {e}"}
