import time
from typing import Any, Dict

from wsikit.alignment import PromptTemplateSet, make_stub_text_encoder, zero_shot_classify
from wsikit.errors import DimensionMismatchError
from wsikit.features import read_feature_matrix
from wsikit.nodes.common import read_labels, write_json
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def cmd_zeroshot(config: PipelineConfig) -> Dict[str, Any]:
    """
    Zero-shot classify image features against prompt-ensemble prototypes.

    Image features default to the region features of the current work dir;
    text embeddings come from the seeded stub text encoder at the image dim.

    Returns:
        The zero-shot result dict (also written to results/zeroshot.json)
    """
    logger = get_logger()
    start_time = time.time()

    try:
        features_path = config.zeroshot_features or config.region_features_file
        features = read_feature_matrix(config.require_file(features_path, "zeroshot_features"))
        labels = None
        if config.labels_path is not None:
            labels = read_labels(config.require_file(config.labels_path, "labels_path"))
            if len(labels) != features.rows:
                raise DimensionMismatchError(f"{features.rows} feature rows but {len(labels)} labels")

        prompts = PromptTemplateSet(templates=config.prompt_templates, class_names=config.zeroshot_class_names)
        text_encoder = make_stub_text_encoder(config.text_encoder_seed, features.dim)
        result = zero_shot_classify(features, prompts, text_encoder, labels)

        payload = result.to_json_dict()
        payload["metric"] = "balanced_accuracy" if config.balanced_accuracy else "accuracy"
        write_json(payload, config.results_dir / "zeroshot.json")

        logger.log_evaluation(
            step_name="zeroshot",
            duration=time.time() - start_time,
            results={k: payload[k] for k in ("overall_accuracy", "balanced_accuracy", "metric")},
        )
        return payload

    except Exception as e:
        logger.log_step(
            step_name="zeroshot",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
