import json
import time
from typing import Any, Dict

from wsikit.schedule import STAGE_HPARAMS, build_stage_plan, render_stage_report
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def cmd_stageplan(config: PipelineConfig, all_stages: bool = False) -> Dict[str, Any]:
    """
    Render the configured stage's plan (or all four) to results/stage_plan.json.

    Returns:
        The rendered report as a dict
    """
    logger = get_logger()
    start_time = time.time()

    try:
        stages = sorted(STAGE_HPARAMS) if all_stages else [config.stage]
        report = render_stage_report([build_stage_plan(s) for s in stages])
        path = config.results_dir / "stage_plan.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report + "\n", encoding="utf-8")

        logger.log_evaluation(
            step_name="stageplan",
            duration=time.time() - start_time,
            results={"stages": stages, "report": str(path)},
        )
        return json.loads(report)

    except Exception as e:
        logger.log_step(
            step_name="stageplan",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
