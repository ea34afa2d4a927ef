"""
N-shot linear probing on frozen features.

For every (seed, shot) pair: draw N training samples per class without
replacement, fit an affine classifier with AdamW, evaluate on the held-out
remainder (or an official test split) after every epoch and keep the best
epoch's accuracy.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator

from wsikit.errors import DimensionMismatchError, InsufficientSamplesError
from wsikit.features import FeatureMatrix
from wsikit.utils.config import DEFAULT_PROBE_SHOTS
from wsikit.utils.scoring import accuracy

logger = logging.getLogger(__name__)

PROBE_COLUMNS = ["dataset", "shot", "seed", "accuracy"]


class ProbeProtocol(BaseModel):
    shots: List[int] = Field(default_factory=lambda: list(DEFAULT_PROBE_SHOTS))
    seeds: int = Field(10, ge=1)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-2, gt=0)

    @field_validator("shots")
    @classmethod
    def shots_sorted(cls, v: List[int]) -> List[int]:
        if not v or any(s < 1 for s in v) or v != sorted(v):
            raise ValueError("shots must be positive and sorted ascending")
        return v

    @property
    def seed_list(self) -> List[int]:
        return list(range(self.seeds))


def _as_array(values) -> np.ndarray:
    return values.data if isinstance(values, FeatureMatrix) else np.asarray(values)


def sample_shots(labels: np.ndarray, shot: int, seed: int) -> np.ndarray:
    """Indices of `shot` samples per class, drawn without replacement (sorted)."""
    rng = np.random.default_rng([seed, shot])
    picked = [rng.choice(np.flatnonzero(labels == c), size=shot, replace=False) for c in np.unique(labels)]
    return np.sort(np.concatenate(picked))


def train_linear_classifier(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    num_classes: int,
    protocol: ProbeProtocol,
    seed: int,
) -> float:
    """
    Fit a zero-initialized affine classifier and return the best epoch's test accuracy.
    """
    classifier = nn.Linear(train_x.shape[1], num_classes)
    nn.init.zeros_(classifier.weight)
    nn.init.zeros_(classifier.bias)
    optimizer = torch.optim.AdamW(classifier.parameters(), lr=protocol.learning_rate)
    generator = torch.Generator().manual_seed(seed)

    x = torch.from_numpy(np.asarray(train_x, dtype=np.float32))
    y = torch.from_numpy(np.asarray(train_y, dtype=np.int64))
    x_test = torch.from_numpy(np.asarray(test_x, dtype=np.float32))

    best = 0.0
    for _ in range(protocol.epochs):
        classifier.train()
        order = torch.randperm(len(x), generator=generator)
        for start in range(0, len(order), protocol.batch_size):
            idx = order[start:start + protocol.batch_size]
            loss = F.cross_entropy(classifier(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        classifier.eval()
        with torch.no_grad():
            predictions = classifier(x_test).argmax(dim=1).numpy()
        best = max(best, accuracy(test_y, predictions))
    return best


def linear_probe(
    features: Union[FeatureMatrix, np.ndarray],
    labels,
    protocol: Optional[ProbeProtocol] = None,
    test_features: Optional[Union[FeatureMatrix, np.ndarray]] = None,
    test_labels=None,
    dataset: str = "dataset",
    threads: int = 1,
) -> pd.DataFrame:
    """
    Run the N-shot linear probing protocol.

    Args:
        features: (M, dim) frozen training-pool features
        labels: M class labels (any integer coding)
        protocol: Shots, seeds and optimizer settings
        test_features: Optional official test split; otherwise the held-out
            remainder of the pool is used
        test_labels: Labels of the test split
        dataset: Dataset name written to every record
        threads: Workers over (seed, shot) pairs

    Returns:
        DataFrame with columns dataset, shot, seed, accuracy; one row per
        (shot, seed), sorted by shot then seed

    Raises:
        InsufficientSamplesError: If a class has fewer than max(shots) samples
            or nothing is left to evaluate on
        DimensionMismatchError: If features and labels disagree
    """
    protocol = protocol or ProbeProtocol()
    x = np.asarray(_as_array(features), dtype=np.float32)
    y_raw = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y_raw):
        raise DimensionMismatchError(f"{len(x)} feature rows but {len(y_raw)} labels")

    classes, y = np.unique(y_raw, return_inverse=True)
    max_shot = protocol.shots[-1]
    counts = np.bincount(y, minlength=len(classes))
    if len(classes) < 2:
        raise InsufficientSamplesError("linear probing needs at least 2 classes")
    if counts.min() < max_shot:
        short = classes[counts.argmin()]
        raise InsufficientSamplesError(f"class {short} has {counts.min()} samples, {max_shot} shots requested")

    official_test = None
    if test_features is not None:
        test_x = np.asarray(_as_array(test_features), dtype=np.float32)
        test_y_raw = np.asarray(test_labels)
        if test_x.shape[1] != x.shape[1] or len(test_x) != len(test_y_raw):
            raise DimensionMismatchError("test split does not match the training features")
        official_test = (test_x, np.searchsorted(classes, test_y_raw))

    def run(key: Tuple[int, int]) -> dict:
        shot, seed = key
        train_idx = sample_shots(y, shot, seed)
        if official_test is not None:
            test_x, test_y = official_test
        else:
            held_out = np.setdiff1d(np.arange(len(y)), train_idx)
            if held_out.size == 0:
                raise InsufficientSamplesError(f"no held-out samples left at {shot} shots")
            test_x, test_y = x[held_out], y[held_out]
        score = train_linear_classifier(x[train_idx], y[train_idx], test_x, test_y, len(classes), protocol, seed)
        logger.debug("probe %s shot=%d seed=%d accuracy=%.4f", dataset, shot, seed, score)
        return {"dataset": dataset, "shot": shot, "seed": seed, "accuracy": score}

    keys = [(shot, seed) for shot in protocol.shots for seed in protocol.seed_list]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            records = list(executor.map(run, keys))
    else:
        records = [run(key) for key in keys]

    return pd.DataFrame.from_records(records, columns=PROBE_COLUMNS).sort_values(["shot", "seed"], ignore_index=True)


def summarize_probe(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and std accuracy per shot."""
    return results.groupby("shot")["accuracy"].agg(["mean", "std"]).reset_index()


def make_synthetic_probe_dataset(
    per_class: int = 160,
    dim: int = 32,
    num_classes: int = 2,
    separation: float = 3.0,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian class blobs with random unit-direction means scaled by `separation`."""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dim))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    features = np.vstack([means[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class)
    return features.astype(np.float32), labels
