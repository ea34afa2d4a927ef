"""
Tissue segmentation, region planning and multi-scale tile subdivision.

Regions are 2048x2048 blocks on an axis-aligned grid anchored at the slide
origin. Each retained region is split into 1 + 4 + 16 tiles at scales
2048 / 1024 / 512. Patch-mode images are split with an AnyRes grid of up
to 3x3 cells plus a global view.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image

from wsikit.errors import DimensionMismatchError, EmptySlideError, InputError, InvalidSpecError, ManifestMismatchError
from wsikit.slide import SlideRaster

logger = logging.getLogger(__name__)

REGION_SIZE = 2048
TILE_SCALES = (2048, 1024, 512)
TILES_PER_REGION = sum((REGION_SIZE // s) ** 2 for s in TILE_SCALES)  # 21
MIN_TISSUE_FRACTION = 0.10
DEFAULT_DOWNSAMPLE_FACTOR = 32
DEFAULT_SATURATION_THRESHOLD = 0.08
ANYRES_MAX_SPLITS = 3


@dataclass(frozen=True, eq=False)
class TissueMask:
    """Boolean grid over downsampled blocks, True = tissue"""
    width: int
    height: int
    downsample_factor: int
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise DimensionMismatchError(f"mask bits {self.bits.shape} != {(self.height, self.width)}")

    @property
    def tissue_cells(self) -> int:
        return int(self.bits.sum())

    def covers(self, slide: SlideRaster) -> bool:
        f = self.downsample_factor
        return self.width == -(-slide.width_px // f) and self.height == -(-slide.height_px // f)


@dataclass(frozen=True)
class Region:
    origin_x: int
    origin_y: int
    tissue_fraction: float


@dataclass
class RegionPlan:
    slide_id: str
    regions: List[Region] = field(default_factory=list)


@dataclass(frozen=True)
class TileRecord:
    """A square tile, offsets relative to its region origin"""
    scale: int
    offset_x: int
    offset_y: int

    @property
    def width(self) -> int:
        return self.scale

    @property
    def height(self) -> int:
        return self.scale


@dataclass
class TileManifest:
    slide_id: str
    regions: List[Region] = field(default_factory=list)
    tiles: Dict[Tuple[int, int], List[TileRecord]] = field(default_factory=dict)

    @property
    def tile_count(self) -> int:
        return sum(len(t) for t in self.tiles.values())

    def region_tiles(self, region: Region) -> List[TileRecord]:
        return self.tiles[(region.origin_x, region.origin_y)]


@dataclass(frozen=True)
class AnyResGrid:
    grid_rows: int
    grid_cols: int
    cell_w: int
    cell_h: int
    includes_global_view: bool = True

    @property
    def cells(self) -> int:
        return self.grid_rows * self.grid_cols


def _saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation in [0, 1] per pixel."""
    mx = rgb.max(axis=-1).astype(np.float64)
    mn = rgb.min(axis=-1).astype(np.float64)
    return np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)


def segment_tissue(
    slide: SlideRaster,
    downsample_factor: int = DEFAULT_DOWNSAMPLE_FACTOR,
    saturation_threshold: float = DEFAULT_SATURATION_THRESHOLD,
) -> TissueMask:
    """
    Mark downsampled blocks whose mean HSV saturation exceeds the threshold.

    Edge blocks that are cut by the slide border average over the pixels
    they actually contain.

    Args:
        slide: Source slide
        downsample_factor: Block edge length in pixels
        saturation_threshold: Strict lower bound on mean block saturation

    Returns:
        TissueMask of ceil(W/f) x ceil(H/f) cells

    Raises:
        EmptySlideError: If the slide holds no pixels
        InputError: If the factor or threshold is out of range
    """
    if slide.pixels.size == 0:
        raise EmptySlideError(f"slide {slide.slide_id} has no pixels")
    if downsample_factor < 1:
        raise InputError(f"downsample_factor must be >= 1, got {downsample_factor}")
    if not 0.0 <= saturation_threshold < 1.0:
        raise InputError(f"saturation_threshold must be in [0, 1), got {saturation_threshold}")

    f = downsample_factor
    width, height = slide.width_px, slide.height_px
    mask_w, mask_h = -(-width // f), -(-height // f)
    col_starts = np.arange(0, width, f)
    col_widths = np.minimum(f, width - col_starts)

    bits = np.zeros((mask_h, mask_w), dtype=bool)
    # One strip of block rows at a time keeps memory at O(f * W)
    for j in range(mask_h):
        y0, y1 = j * f, min(height, (j + 1) * f)
        column_sums = _saturation(slide.pixels[y0:y1]).sum(axis=0)
        block_sums = np.add.reduceat(column_sums, col_starts)
        bits[j] = block_sums / (col_widths * (y1 - y0)) > saturation_threshold

    logger.debug("segmented %s: %d/%d tissue cells", slide.slide_id, int(bits.sum()), bits.size)
    return TissueMask(width=mask_w, height=mask_h, downsample_factor=f, bits=bits)


def _overlap_weights(n_regions: int, n_cells: int, factor: int, extent: int) -> np.ndarray:
    """(n_regions, n_cells) pixel overlap between region spans and mask cell spans."""
    region_start = np.arange(n_regions)[:, None] * REGION_SIZE
    cell_start = np.arange(n_cells)[None, :] * factor
    cell_end = np.minimum(cell_start + factor, extent)
    overlap = np.minimum(region_start + REGION_SIZE, cell_end) - np.maximum(region_start, cell_start)
    return np.clip(overlap, 0, None).astype(np.float64)


def plan_regions(
    slide: SlideRaster,
    mask: TissueMask,
    min_tissue_fraction: float = MIN_TISSUE_FRACTION,
    boundary_policy: str = "discard",
) -> RegionPlan:
    """
    Enumerate the 2048-stride region grid and keep regions with enough tissue.

    A region is retained when its tissue fraction is strictly greater than
    min_tissue_fraction. Candidates that would extend past the slide edge
    are discarded.

    Args:
        slide: Source slide (dimensions and id)
        mask: Tissue mask computed for this slide
        min_tissue_fraction: Exclusive retention threshold
        boundary_policy: Edge handling; only "discard" is implemented

    Returns:
        RegionPlan with regions in row-major order

    Raises:
        InvalidSpecError: If boundary_policy is not "discard"
        DimensionMismatchError: If the mask does not cover the slide
    """
    if boundary_policy != "discard":
        raise InvalidSpecError(f"unsupported boundary policy {boundary_policy!r}; only 'discard' is implemented")
    if not mask.covers(slide):
        raise DimensionMismatchError(
            f"mask {mask.width}x{mask.height} (factor {mask.downsample_factor}) "
            f"does not correspond to slide {slide.width_px}x{slide.height_px}"
        )

    nx, ny = slide.width_px // REGION_SIZE, slide.height_px // REGION_SIZE
    if nx == 0 or ny == 0:
        return RegionPlan(slide_id=slide.slide_id)

    f = mask.downsample_factor
    wx = _overlap_weights(nx, mask.width, f, slide.width_px)
    wy = _overlap_weights(ny, mask.height, f, slide.height_px)
    # Integer-valued products well below 2**53, so the float sums are exact
    tissue_px = wy @ mask.bits.astype(np.float64) @ wx.T
    fractions = tissue_px / float(REGION_SIZE * REGION_SIZE)

    regions = [
        Region(origin_x=rx * REGION_SIZE, origin_y=ry * REGION_SIZE, tissue_fraction=float(fractions[ry, rx]))
        for ry in range(ny)
        for rx in range(nx)
        if fractions[ry, rx] > min_tissue_fraction
    ]
    regions.sort(key=lambda r: (r.origin_y, r.origin_x))
    logger.debug("planned %d/%d regions for %s", len(regions), nx * ny, slide.slide_id)
    return RegionPlan(slide_id=slide.slide_id, regions=regions)


def subdivide_region(region: Region) -> List[TileRecord]:
    """Split a region into its 21 tiles: scale descending, then row-major offsets."""
    tiles = []
    for scale in TILE_SCALES:
        per_side = REGION_SIZE // scale
        for row in range(per_side):
            for col in range(per_side):
                tiles.append(TileRecord(scale=scale, offset_x=col * scale, offset_y=row * scale))
    return tiles


def build_manifest(plan: RegionPlan) -> TileManifest:
    """Subdivide every planned region into the multi-scale tile manifest."""
    manifest = TileManifest(slide_id=plan.slide_id, regions=list(plan.regions))
    for region in plan.regions:
        manifest.tiles[(region.origin_x, region.origin_y)] = subdivide_region(region)
    return manifest


def write_manifest(manifest: TileManifest, path: Union[str, Path]) -> Path:
    """
    Write the manifest as JSON lines, one tile per line.

    tile_x / tile_y are absolute slide coordinates at base magnification.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for region in manifest.regions:
            for tile in manifest.region_tiles(region):
                row = {
                    "slide_id": manifest.slide_id,
                    "region_x": region.origin_x,
                    "region_y": region.origin_y,
                    "scale": tile.scale,
                    "tile_x": region.origin_x + tile.offset_x,
                    "tile_y": region.origin_y + tile.offset_y,
                    "tissue_fraction": region.tissue_fraction,
                }
                f.write(json.dumps(row) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> TileManifest:
    """
    Read a JSON-lines manifest back into a TileManifest.

    Raises:
        ManifestMismatchError: On malformed rows or regions without exactly 21 tiles
    """
    manifest = TileManifest(slide_id="")
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = (int(row["region_x"]), int(row["region_y"]))
                tile = TileRecord(
                    scale=int(row["scale"]),
                    offset_x=int(row["tile_x"]) - key[0],
                    offset_y=int(row["tile_y"]) - key[1],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestMismatchError(f"{path}:{line_no}: malformed manifest row: {e}")

            if manifest.slide_id and row["slide_id"] != manifest.slide_id:
                raise ManifestMismatchError(f"{path}:{line_no}: mixed slide ids in one manifest")
            manifest.slide_id = row["slide_id"]
            if key not in manifest.tiles:
                manifest.regions.append(Region(key[0], key[1], float(row["tissue_fraction"])))
                manifest.tiles[key] = []
            manifest.tiles[key].append(tile)

    for key, tiles in manifest.tiles.items():
        if len(tiles) != TILES_PER_REGION:
            raise ManifestMismatchError(
                f"region {key} has {len(tiles)} tiles, expected {TILES_PER_REGION}"
            )
    return manifest


def _fit_size(image_w: int, image_h: int, grid_w: int, grid_h: int) -> Tuple[int, int]:
    """Aspect-preserving fit of the image into the grid, in integer arithmetic."""
    if grid_w * image_h <= grid_h * image_w:
        return grid_w, (image_h * grid_w) // image_w
    return (image_w * grid_h) // image_h, grid_h


def _grid_cost(image_w: int, image_h: int, rows: int, cols: int, base_cell: int) -> Tuple[int, int, int, bool]:
    grid_w, grid_h = cols * base_cell, rows * base_cell
    fit_w, fit_h = _fit_size(image_w, image_h, grid_w, grid_h)
    effective = min(fit_w * fit_h, image_w * image_h)
    padded = grid_w * grid_h - effective
    # Resolution lost to downscaling dominates, then padding, then cell count, then r <= c
    return (image_w * image_h - effective, padded, rows * cols, rows > cols)


def anyres_split(image_w: int, image_h: int, base_cell: int) -> AnyResGrid:
    """
    Pick the AnyRes grid (rows, cols in 1..3) for a patch-mode image.

    Args:
        image_w, image_h: Image size in pixels
        base_cell: Native input size of the patch encoder

    Returns:
        AnyResGrid with the selected pinpoint; a global view is always included

    Raises:
        InputError: If any argument is below 1
    """
    if image_w < 1 or image_h < 1 or base_cell < 1:
        raise InputError(f"invalid AnyRes arguments ({image_w}, {image_h}, {base_cell})")

    pinpoints = [(r, c) for r in range(1, ANYRES_MAX_SPLITS + 1) for c in range(1, ANYRES_MAX_SPLITS + 1)]
    rows, cols = min(pinpoints, key=lambda rc: _grid_cost(image_w, image_h, rc[0], rc[1], base_cell))
    return AnyResGrid(grid_rows=rows, grid_cols=cols, cell_w=base_cell, cell_h=base_cell)


def anyres_crops(image: np.ndarray, grid: AnyResGrid) -> List[np.ndarray]:
    """
    Produce the global view followed by the grid cells in row-major order.

    The image is resized to fit the grid preserving aspect ratio and padded
    with black, centered, before splitting.
    """
    source = Image.fromarray(np.ascontiguousarray(image))
    crops = [np.asarray(source.resize((grid.cell_w, grid.cell_h), Image.BICUBIC))]

    grid_w, grid_h = grid.grid_cols * grid.cell_w, grid.grid_rows * grid.cell_h
    fit_w, fit_h = _fit_size(source.width, source.height, grid_w, grid_h)
    canvas = Image.new("RGB", (grid_w, grid_h), (0, 0, 0))
    canvas.paste(source.resize((max(fit_w, 1), max(fit_h, 1)), Image.BICUBIC),
                 ((grid_w - fit_w) // 2, (grid_h - fit_h) // 2))
    padded = np.asarray(canvas)
    for row in range(grid.grid_rows):
        for col in range(grid.grid_cols):
            y0, x0 = row * grid.cell_h, col * grid.cell_w
            crops.append(np.ascontiguousarray(padded[y0:y0 + grid.cell_h, x0:x0 + grid.cell_w]))
    return crops
