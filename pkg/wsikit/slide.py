"""
Slide abstraction: synthetic slide generation, window reads and slide IO.

Pixels are 8-bit RGB, row-major, no alpha. A raster is read-only after
construction, so concurrent window reads are safe.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from wsikit.errors import BoundsError, CorruptFileError, InvalidSpecError

logger = logging.getLogger(__name__)

MIN_SYNTHETIC_SIZE = 512

RGB = Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class SlideRaster:
    """An addressable RGB plane with magnification metadata"""
    slide_id: str
    width_px: int
    height_px: int
    base_magnification: float
    # (height_px, width_px, 3) uint8; in-memory array or np.memmap over a raw file
    pixels: np.ndarray

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise InvalidSpecError(f"slide dimensions must be positive, got {self.width_px}x{self.height_px}")
        if self.base_magnification <= 0:
            raise InvalidSpecError(f"base_magnification must be positive, got {self.base_magnification}")
        if self.pixels.shape != (self.height_px, self.width_px, 3) or self.pixels.dtype != np.uint8:
            raise InvalidSpecError(
                f"pixel buffer must be uint8 of shape {(self.height_px, self.width_px, 3)}, "
                f"got {self.pixels.dtype} {self.pixels.shape}"
            )


class SyntheticSlideSpec(BaseModel):
    """Parameters of a synthetic slide; identical specs give byte-identical rasters"""

    model_config = ConfigDict(frozen=True)

    seed: int = Field(0, ge=0, lt=2**64)
    width_px: int = Field(..., ge=1)
    height_px: int = Field(..., ge=1)
    blob_count: int = Field(0, ge=0)
    blob_radius_px: Tuple[int, int] = (256, 1024)
    tissue_color: RGB = (180, 60, 140)
    background_color: RGB = (242, 242, 242)
    base_magnification: float = Field(40.0, gt=0)
    slide_id: str = "synthetic"


def generate_synthetic_slide(spec: SyntheticSlideSpec) -> SlideRaster:
    """
    Render elliptical tissue blobs on a uniform background.

    Args:
        spec: Synthetic slide parameters

    Returns:
        SlideRaster holding the rendered pixels

    Raises:
        InvalidSpecError: If either dimension is below 512 or the radius range is invalid
    """
    if spec.width_px < MIN_SYNTHETIC_SIZE or spec.height_px < MIN_SYNTHETIC_SIZE:
        raise InvalidSpecError(
            f"synthetic slides must be at least {MIN_SYNTHETIC_SIZE}px per axis, "
            f"got {spec.width_px}x{spec.height_px}"
        )
    r_min, r_max = spec.blob_radius_px
    if r_min < 1 or r_max < r_min:
        raise InvalidSpecError(f"invalid blob radius range {spec.blob_radius_px}")

    rng = np.random.default_rng(spec.seed)
    pixels = np.empty((spec.height_px, spec.width_px, 3), dtype=np.uint8)
    pixels[:] = np.asarray(spec.background_color, dtype=np.uint8)
    tissue = np.asarray(spec.tissue_color, dtype=np.uint8)

    for _ in range(spec.blob_count):
        cx = int(rng.integers(0, spec.width_px))
        cy = int(rng.integers(0, spec.height_px))
        rx = int(rng.integers(r_min, r_max + 1))
        ry = int(rng.integers(r_min, r_max + 1))

        # Only the bounding box of the ellipse is touched
        x0, x1 = max(0, cx - rx), min(spec.width_px, cx + rx + 1)
        y0, y1 = max(0, cy - ry), min(spec.height_px, cy + ry + 1)
        ys = np.arange(y0, y1, dtype=np.float64)[:, None]
        xs = np.arange(x0, x1, dtype=np.float64)[None, :]
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        pixels[y0:y1, x0:x1][inside] = tissue

    logger.debug("generated synthetic slide %s (%dx%d, %d blobs)",
                 spec.slide_id, spec.width_px, spec.height_px, spec.blob_count)
    return SlideRaster(
        slide_id=spec.slide_id,
        width_px=spec.width_px,
        height_px=spec.height_px,
        base_magnification=spec.base_magnification,
        pixels=pixels,
    )


def read_window(slide: SlideRaster, x: int, y: int, w: int, h: int) -> np.ndarray:
    """
    Read a rectangular window of the slide.

    Args:
        slide: Source slide
        x, y: Top-left corner in base-magnification pixels
        w, h: Window size

    Returns:
        Contiguous (h, w, 3) uint8 array (row-major RGB bytes via .tobytes())

    Raises:
        BoundsError: If any part of the window lies outside the slide (no clamping)
    """
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > slide.width_px or y + h > slide.height_px:
        raise BoundsError(
            f"window ({x}, {y}, {w}, {h}) outside slide {slide.slide_id} "
            f"of size {slide.width_px}x{slide.height_px}"
        )
    return np.ascontiguousarray(slide.pixels[y:y + h, x:x + w])


def count_tissue_pixels(slide: SlideRaster, background_color: RGB) -> int:
    """Count pixels that differ from the background color in any channel."""
    background = np.asarray(background_color, dtype=np.uint8)
    return int(np.any(slide.pixels != background, axis=-1).sum())


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_slide(slide: SlideRaster, path: Union[str, Path]) -> Path:
    """
    Write a slide as PNG (".png") or raw RGB (any other suffix) plus a JSON sidecar.

    Args:
        slide: Slide to persist
        path: Destination pixel file

    Returns:
        Path of the JSON sidecar
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "png" if path.suffix.lower() == ".png" else "raw"
    if fmt == "png":
        Image.fromarray(np.asarray(slide.pixels)).save(path, format="PNG")
    else:
        np.asarray(slide.pixels, dtype=np.uint8).tofile(path)

    sidecar = _sidecar_path(path)
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump({
            "slide_id": slide.slide_id,
            "width_px": slide.width_px,
            "height_px": slide.height_px,
            "base_magnification": slide.base_magnification,
            "format": fmt,
        }, f, indent=2)
    return sidecar


def load_slide(path: Union[str, Path]) -> SlideRaster:
    """
    Load a slide written by save_slide.

    Raw files are memory-mapped read-only instead of being loaded whole.

    Raises:
        CorruptFileError: If the sidecar is missing or disagrees with the pixel file
    """
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not path.exists() or not sidecar.exists():
        raise CorruptFileError(f"slide file or sidecar missing: {path}")

    with open(sidecar, 'r', encoding='utf-8') as f:
        meta = json.load(f)

    width, height = int(meta["width_px"]), int(meta["height_px"])
    if meta.get("format") == "png":
        Image.MAX_IMAGE_PIXELS = None
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    else:
        expected = width * height * 3
        if path.stat().st_size != expected:
            raise CorruptFileError(f"raw slide {path} holds {path.stat().st_size} bytes, expected {expected}")
        pixels = np.memmap(path, dtype=np.uint8, mode="r", shape=(height, width, 3))

    if pixels.shape != (height, width, 3):
        raise CorruptFileError(f"slide {path} has shape {pixels.shape}, sidecar says {(height, width, 3)}")

    return SlideRaster(
        slide_id=str(meta["slide_id"]),
        width_px=width,
        height_px=height,
        base_magnification=float(meta["base_magnification"]),
        pixels=pixels,
    )
