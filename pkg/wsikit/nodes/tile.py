import time
from typing import Any, Dict

from wsikit.slide import SlideRaster, SyntheticSlideSpec, generate_synthetic_slide, load_slide
from wsikit.tiler import build_manifest, plan_regions, segment_tissue, write_manifest
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def resolve_slide(config: PipelineConfig) -> SlideRaster:
    """
    Open the configured slide, or render the synthetic slide the config describes.

    Raises:
        ConfigError: If slide_path is set but missing
        CorruptFileError: If the slide file is unreadable
    """
    if config.slide_path is not None:
        return load_slide(config.require_file(config.slide_path, "slide_path"))
    spec = SyntheticSlideSpec(
        seed=config.seed,
        width_px=config.synthetic_width,
        height_px=config.synthetic_height,
        blob_count=config.synthetic_blobs,
        blob_radius_px=(config.synthetic_blob_radius_min, config.synthetic_blob_radius_max),
        base_magnification=config.magnification,
        slide_id=f"synthetic-{config.seed}",
    )
    return generate_synthetic_slide(spec)


def cmd_tile(config: PipelineConfig) -> Dict[str, Any]:
    """
    Segment tissue, plan regions and write the tile manifest.

    Args:
        config: Pipeline configuration

    Returns:
        Summary with slide_id, region_count, tile_count, mean_tissue_fraction
        and manifest path
    """
    logger = get_logger()
    start_time = time.time()
    slide_id = None

    try:
        slide = resolve_slide(config)
        slide_id = slide.slide_id
        mask = segment_tissue(slide, config.downsample_factor, config.saturation_threshold)
        plan = plan_regions(slide, mask, config.min_tissue_fraction, config.boundary_policy)
        manifest = build_manifest(plan)
        path = write_manifest(manifest, config.manifest_file)

        region_count = len(plan.regions)
        mean_fraction = (
            sum(r.tissue_fraction for r in plan.regions) / region_count if region_count else 0.0
        )
        summary = {
            "slide_id": slide_id,
            "region_count": region_count,
            "tile_count": manifest.tile_count,
            "mean_tissue_fraction": mean_fraction,
            "boundary_policy": config.boundary_policy,
            "manifest": str(path),
        }

        logger.log_tiling(
            slide_id=slide_id,
            duration=time.time() - start_time,
            region_count=region_count,
            tile_count=manifest.tile_count,
            mean_tissue_fraction=mean_fraction,
        )
        return summary

    except Exception as e:
        logger.log_step(
            step_name="tile",
            slide_id=slide_id,
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
