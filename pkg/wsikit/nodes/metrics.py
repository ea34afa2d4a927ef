import time
from typing import Any, Dict

from wsikit.nodes.common import read_lines, write_json
from wsikit.text_metrics import metric_report
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def cmd_metrics(config: PipelineConfig) -> Dict[str, Any]:
    """
    Score line-aligned candidate reports against references.

    Returns:
        {bleu1..bleu4, rouge_l}, also written to results/metrics.json
    """
    logger = get_logger()
    start_time = time.time()

    try:
        candidates = read_lines(config.require_file(config.candidates_path, "candidates_path"))
        references = read_lines(config.require_file(config.references_path, "references_path"))
        report = metric_report(candidates, references, beta=config.rouge_beta).model_dump()
        write_json(report, config.results_dir / "metrics.json")

        logger.log_evaluation(
            step_name="metrics",
            duration=time.time() - start_time,
            results=report,
        )
        return report

    except Exception as e:
        logger.log_step(
            step_name="metrics",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
