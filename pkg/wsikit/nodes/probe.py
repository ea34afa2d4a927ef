import time
from typing import Any, Dict

from wsikit.features import read_feature_matrix
from wsikit.nodes.common import read_labels
from wsikit.probe import ProbeProtocol, linear_probe, make_synthetic_probe_dataset, summarize_probe
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def cmd_probe(config: PipelineConfig) -> Dict[str, Any]:
    """
    Run the linear-probe protocol and write results/probe_<dataset>.csv.

    Without probe_features the bundled synthetic two-class dataset is used.

    Returns:
        Summary with the record count, per-shot mean accuracy and CSV path
    """
    logger = get_logger()
    start_time = time.time()

    try:
        if config.probe_features is not None:
            features = read_feature_matrix(config.require_file(config.probe_features, "probe_features")).data
            labels = read_labels(config.require_file(config.probe_labels, "probe_labels"))
            dataset = config.probe_dataset
        else:
            features, labels = make_synthetic_probe_dataset(seed=config.seed)
            dataset = "synthetic"

        protocol = ProbeProtocol(shots=config.probe_shots, seeds=config.probe_seeds)
        results = linear_probe(features, labels, protocol, dataset=dataset, threads=config.threads)

        path = config.results_dir / f"probe_{dataset}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        results.to_csv(path, index=False)

        means = summarize_probe(results)
        summary = {
            "dataset": dataset,
            "records": len(results),
            "mean_accuracy": {int(row.shot): float(row.mean) for row in means.itertuples()},
            "results": str(path),
        }
        logger.log_evaluation(
            step_name="probe",
            duration=time.time() - start_time,
            results=summary,
        )
        return summary

    except Exception as e:
        logger.log_step(
            step_name="probe",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
