"""
Patch encoders, dual-tower concatenation, region aggregation and the MLP projector.

Real vision towers are outside this package: EncoderSpec is the boundary at
which they plug in, and precomputed features can be imported through the
feature file format. Desk-scale runs use seeded stub encoders.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from wsikit.errors import DimensionMismatchError, EncoderError, ManifestMismatchError
from wsikit.features import FeatureMatrix, Provenance
from wsikit.tiler import TILE_SCALES, TILES_PER_REGION, REGION_SIZE

logger = logging.getLogger(__name__)

# Tile rows per scale in manifest order: 1 x 2048, 4 x 1024, 16 x 512
_SCALE_ROW_COUNTS = [(REGION_SIZE // s) ** 2 for s in TILE_SCALES]


@dataclass(frozen=True, eq=False)
class EncoderSpec:
    """A vision tower: resizes a tile to its input size and embeds it"""
    name: str
    input_size_px: int
    output_dim: int
    embed: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.output_dim < 1:
            raise DimensionMismatchError(f"encoder {self.name}: output_dim must be >= 1")

    def __call__(self, tile: np.ndarray) -> np.ndarray:
        vector = np.asarray(self.embed(_resize(tile, self.input_size_px)), dtype=np.float64)
        if vector.shape != (self.output_dim,):
            raise DimensionMismatchError(
                f"encoder {self.name} returned shape {vector.shape}, expected ({self.output_dim},)"
            )
        return vector


def _resize(tile: np.ndarray, size: int) -> np.ndarray:
    if tile.shape[0] == size and tile.shape[1] == size:
        return tile
    return np.asarray(Image.fromarray(np.ascontiguousarray(tile)).resize((size, size), Image.BILINEAR))


def _channel_statistics(tile: np.ndarray) -> np.ndarray:
    """Per-channel mean/std/min/max plus 2x2 quadrant means, scaled to [0, 1]."""
    pixels = tile.astype(np.float64) / 255.0
    flat = pixels.reshape(-1, 3)
    half_h, half_w = max(1, tile.shape[0] // 2), max(1, tile.shape[1] // 2)
    quadrants = [
        pixels[:half_h, :half_w], pixels[:half_h, half_w:],
        pixels[half_h:, :half_w], pixels[half_h:, half_w:],
    ]
    quadrant_means = [q.reshape(-1, 3).mean(axis=0) if q.size else np.zeros(3) for q in quadrants]
    return np.concatenate([flat.mean(axis=0), flat.std(axis=0), flat.min(axis=0), flat.max(axis=0), *quadrant_means])


_STAT_DIM = 24


def make_stub_encoder(seed: int, output_dim: int, input_size_px: int = 224, name: Optional[str] = None) -> EncoderSpec:
    """
    Deterministic encoder: seeded random projection of channel statistics.

    Args:
        seed: Projection seed
        output_dim: Embedding width
        input_size_px: Side length tiles are resized to before embedding

    Returns:
        EncoderSpec whose embedding depends only on (seed, tile pixels)
    """
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((output_dim, _STAT_DIM)) / np.sqrt(_STAT_DIM)
    bias = 0.1 * rng.standard_normal(output_dim)

    def embed(tile: np.ndarray) -> np.ndarray:
        return weights @ _channel_statistics(tile) + bias

    return EncoderSpec(
        name=name or f"stub-{seed}-{output_dim}",
        input_size_px=input_size_px,
        output_dim=output_dim,
        embed=embed,
    )


def make_zero_encoder(output_dim: int, input_size_px: int = 224) -> EncoderSpec:
    """Encoder that maps every tile to the zero vector."""
    return EncoderSpec(
        name=f"zero-{output_dim}",
        input_size_px=input_size_px,
        output_dim=output_dim,
        embed=lambda tile: np.zeros(output_dim),
    )


def encode_tiles(
    tiles: Sequence[np.ndarray],
    enc_a: EncoderSpec,
    enc_b: Optional[EncoderSpec] = None,
    threads: int = 1,
) -> FeatureMatrix:
    """
    Embed tiles with both towers and concatenate (enc_a first, then enc_b).

    Leaving enc_b out encodes with a single tower.

    Args:
        tiles: RGB tiles as (h, w, 3) uint8 arrays
        enc_a: First tower
        enc_b: Optional second tower
        threads: Worker threads; output order always follows input order

    Returns:
        FeatureMatrix with one row per tile, dim = dim_a + dim_b

    Raises:
        EncoderError: If any tile fails to encode (carries the tile index)
    """
    towers = [enc_a] if enc_b is None else [enc_a, enc_b]
    dim = sum(t.output_dim for t in towers)

    def encode_one(indexed):
        index, tile = indexed
        try:
            return np.concatenate([tower(tile) for tower in towers])
        except Exception as e:
            raise EncoderError(index, str(e)) from e

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(encode_one, enumerate(tiles)))
    else:
        rows = [encode_one(item) for item in enumerate(tiles)]

    data = np.vstack(rows) if rows else np.zeros((0, dim))
    return FeatureMatrix.from_array(data.reshape(-1, dim), Provenance.TILE)


def aggregate_region(
    tile_features: FeatureMatrix,
    mode: Literal["mean", "scale_balanced"] = "mean",
) -> np.ndarray:
    """
    Average-pool the 21 tile features of one region.

    Args:
        tile_features: 21 rows in manifest order (2048, then 1024s, then 512s)
        mode: "mean" weighs all tiles equally; "scale_balanced" averages the
            three per-scale means

    Returns:
        Region feature vector (float64)

    Raises:
        ManifestMismatchError: If the row count is not 21
    """
    if tile_features.rows != TILES_PER_REGION:
        raise ManifestMismatchError(
            f"region aggregation needs {TILES_PER_REGION} tile rows, got {tile_features.rows}"
        )
    data = tile_features.data.astype(np.float64)
    if mode == "mean":
        return data.mean(axis=0)
    if mode == "scale_balanced":
        bounds = np.cumsum([0] + _SCALE_ROW_COUNTS)
        return np.mean([data[lo:hi].mean(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])], axis=0)
    raise ValueError(f"Unknown aggregation mode: {mode}")


class Projector(nn.Module):
    """Two-layer MLP projector (in_dim -> hidden -> out_dim)"""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: Literal["gelu", "identity"] = "gelu"):
        super().__init__()
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = nn.GELU() if activation == "gelu" else nn.Identity()
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


# Projector parameters are the projector weights
ProjectorWeights = Projector


def project(features: FeatureMatrix, weights: Projector) -> FeatureMatrix:
    """
    Map every feature row through the projector independently.

    Raises:
        DimensionMismatchError: If the feature dim differs from the projector in_dim
    """
    if features.dim != weights.in_dim:
        raise DimensionMismatchError(f"feature dim {features.dim} != projector in_dim {weights.in_dim}")
    dtype = weights.fc1.weight.dtype
    with torch.no_grad():
        out = weights(torch.from_numpy(features.data).to(dtype))
    return FeatureMatrix.from_array(out.numpy(), features.provenance)


def stack_region_features(vectors: List[np.ndarray]) -> FeatureMatrix:
    """Stack per-region vectors into a REGION feature matrix."""
    return FeatureMatrix.from_array(np.vstack(vectors), Provenance.REGION)
