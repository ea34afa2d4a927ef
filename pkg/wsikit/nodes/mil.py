import time
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd
import torch

from wsikit.errors import ConfigError, ManifestMismatchError
from wsikit.features import read_feature_matrix
from wsikit.mil import ABMILHead, make_synthetic_bags, mil_train, predict_bags, write_predictions
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger

# Every VALIDATION_STRIDE-th bag is held out when the labels carry no split column
VALIDATION_STRIDE = 4


def load_bags(config: PipelineConfig) -> Tuple[List[str], List[np.ndarray], np.ndarray, np.ndarray]:
    """
    Bags, labels and validation flags from mil_bags_dir / mil_labels.

    mil_labels is a CSV with columns slide_id, label and optionally split
    ("train" / "val"); each slide_id names <mil_bags_dir>/<slide_id>.wsfm.
    """
    if config.mil_bags_dir is None:
        bags, labels = make_synthetic_bags(seed=config.seed)
        slide_ids = [f"synthetic-{i:03d}" for i in range(len(bags))]
        is_val = np.arange(len(bags)) % VALIDATION_STRIDE == VALIDATION_STRIDE - 1
        return slide_ids, bags, labels, is_val

    if config.mil_labels is None:
        raise ConfigError("'mil_labels' is required when 'mil_bags_dir' is set")
    table = pd.read_csv(config.require_file(config.mil_labels, "mil_labels"))
    missing = {"slide_id", "label"} - set(table.columns)
    if missing:
        raise ManifestMismatchError(f"{config.mil_labels}: missing columns {sorted(missing)}")

    slide_ids = table["slide_id"].astype(str).tolist()
    bags = [read_feature_matrix(config.mil_bags_dir / f"{sid}.wsfm").data for sid in slide_ids]
    labels = table["label"].to_numpy(dtype=np.int64)
    if "split" in table.columns:
        is_val = (table["split"].astype(str).str.lower() == "val").to_numpy()
    else:
        is_val = np.arange(len(bags)) % VALIDATION_STRIDE == VALIDATION_STRIDE - 1
    return slide_ids, bags, labels, is_val


def cmd_mil(config: PipelineConfig) -> Dict[str, Any]:
    """
    Train the gated-attention MIL head and write results/mil_predictions.csv.

    Returns:
        Summary with best epoch, best validation balanced accuracy and CSV path
    """
    logger = get_logger()
    start_time = time.time()

    try:
        slide_ids, bags, labels, is_val = load_bags(config)
        train_idx = np.flatnonzero(~is_val)
        val_idx = np.flatnonzero(is_val)
        if val_idx.size == 0:
            val_idx = train_idx

        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            head = ABMILHead(in_dim=bags[0].shape[1], num_classes=int(labels.max()) + 1)

        result = mil_train(
            head,
            [bags[i] for i in train_idx],
            labels[train_idx],
            [bags[i] for i in val_idx],
            labels[val_idx],
            epochs=config.mil_epochs,
            lr=config.mil_lr,
            seed=config.seed,
        )

        predictions, confidences = predict_bags(result.head, bags)
        path = config.results_dir / "mil_predictions.csv"
        write_predictions(slide_ids, predictions, confidences, path)

        summary = {
            "bags": len(bags),
            "validation_bags": int(val_idx.size),
            "best_epoch": result.best_epoch,
            "best_balanced_accuracy": result.best_balanced_accuracy,
            "predictions": str(path),
        }
        logger.log_evaluation(
            step_name="mil",
            duration=time.time() - start_time,
            results=summary,
        )
        return summary

    except Exception as e:
        logger.log_step(
            step_name="mil",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
