"""
Dense feature matrices and their binary file format.

File layout: 16-byte header (magic b"WSFM", rows u32, dim u32, provenance u32),
then rows*dim little-endian float32 values in row-major order. This is also
the import path for features produced by external pretrained encoders.
"""
import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Union

import numpy as np

from wsikit.errors import CorruptFileError, DimensionMismatchError, NumericError

FEATURE_MAGIC = b"WSFM"
_HEADER = struct.Struct("<4sIII")


class Provenance(IntEnum):
    TILE = 0
    REGION = 1
    COMPRESSED = 2
    TEXT = 3


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row-major matrix of embedding vectors"""
    data: np.ndarray  # (rows, dim) float32
    provenance: Provenance

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimensionMismatchError(f"feature data must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {self.provenance.name.lower()} features")

    @classmethod
    def from_array(cls, values, provenance: Provenance) -> "FeatureMatrix":
        data = np.ascontiguousarray(np.atleast_2d(np.asarray(values)), dtype=np.float32)
        return cls(data=data, provenance=provenance)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(FEATURE_MAGIC, self.rows, self.dim, int(self.provenance))
        return header + self.data.astype("<f4").tobytes()

    def equals(self, other: "FeatureMatrix") -> bool:
        return self.provenance == other.provenance and np.array_equal(self.data, other.data)


def write_feature_matrix(matrix: FeatureMatrix, path: Union[str, Path]) -> str:
    """
    Write a feature matrix atomically.

    Returns:
        SHA-256 hex digest of the written bytes
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = matrix.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return hashlib.sha256(payload).hexdigest()


def read_feature_matrix(path: Union[str, Path]) -> FeatureMatrix:
    """
    Read and validate a feature matrix file.

    Raises:
        CorruptFileError: On a bad magic, unknown provenance or truncated payload
    """
    path = Path(path)
    payload = path.read_bytes()
    if len(payload) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header ({len(payload)} bytes)")

    magic, rows, dim, provenance = _HEADER.unpack_from(payload)
    if magic != FEATURE_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    try:
        provenance = Provenance(provenance)
    except ValueError:
        raise CorruptFileError(f"{path}: unknown provenance code {provenance}")

    expected = _HEADER.size + rows * dim * 4
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: holds {len(payload)} bytes, header implies {expected}")

    data = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).astype(np.float32)
    try:
        return FeatureMatrix(data=data, provenance=provenance)
    except NumericError as e:
        raise CorruptFileError(f"{path}: {e}")
