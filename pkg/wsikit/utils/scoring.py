"""Accuracy helpers shared by the evaluation protocols."""
from typing import Dict

import numpy as np


def accuracy(y_true, y_pred) -> float:
    """Plain accuracy."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        return 0.0
    return float((y_true == y_pred).mean())


def per_class_accuracy(y_true, y_pred) -> Dict[int, float]:
    """Recall of every class present in y_true."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return {int(c): float((y_pred[y_true == c] == c).mean()) for c in np.unique(y_true)}


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in y_true."""
    recalls = per_class_accuracy(y_true, y_pred)
    if not recalls:
        return 0.0
    return float(np.mean(list(recalls.values())))
