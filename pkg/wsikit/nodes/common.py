"""Shared file helpers for the pipeline nodes."""
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from wsikit.errors import CorruptFileError


def read_labels(path: Union[str, Path]) -> np.ndarray:
    """
    Read integer class labels from a CSV file.

    Uses the "label" column when present, otherwise the first column.
    """
    try:
        frame = pd.read_csv(path)
        column = frame["label"] if "label" in frame.columns else frame.iloc[:, 0]
        return column.to_numpy(dtype=np.int64)
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CorruptFileError(f"{path}: unreadable labels: {e}")


def read_lines(path: Union[str, Path]) -> list[str]:
    with open(path, 'r', encoding='utf-8') as f:
        return [line.rstrip("\n") for line in f]


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    """Write JSON with sorted keys so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
