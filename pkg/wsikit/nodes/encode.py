import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from wsikit.encoders import EncoderSpec, aggregate_region, encode_tiles, make_stub_encoder, stack_region_features
from wsikit.errors import BoundsError, CorruptFileError, EmptyInputError, ManifestMismatchError
from wsikit.features import FeatureMatrix, Provenance, read_feature_matrix, write_feature_matrix
from wsikit.nodes.tile import resolve_slide
from wsikit.slide import SlideRaster, read_window
from wsikit.tiler import REGION_SIZE, Region, TileManifest, read_manifest
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger

log = logging.getLogger(__name__)

INDEX_FILE = "index.json"


def build_encoders(config: PipelineConfig) -> Tuple[EncoderSpec, Optional[EncoderSpec]]:
    """Stub towers A and B from the config; encoder_b_dim = 0 disables tower B."""
    enc_a = make_stub_encoder(config.encoder_a_seed, config.encoder_a_dim, config.encoder_input_size)
    enc_b = None
    if config.encoder_b_dim > 0:
        enc_b = make_stub_encoder(config.encoder_b_seed, config.encoder_b_dim, config.encoder_input_size)
    return enc_a, enc_b


def encoder_fingerprint(config: PipelineConfig) -> str:
    """Everything besides pixels that determines a region feature."""
    return json.dumps({
        "encoder_a": [config.encoder_a_seed, config.encoder_a_dim],
        "encoder_b": [config.encoder_b_seed, config.encoder_b_dim],
        "input_size": config.encoder_input_size,
        "aggregation": config.aggregation_mode,
    }, sort_keys=True)


def region_content_hash(slide: SlideRaster, region: Region, fingerprint: str) -> str:
    digest = hashlib.sha256(fingerprint.encode("utf-8"))
    digest.update(read_window(slide, region.origin_x, region.origin_y, REGION_SIZE, REGION_SIZE).tobytes())
    return digest.hexdigest()


def region_file(features_dir: Path, region: Region) -> Path:
    return features_dir / "regions" / f"{region.origin_x}_{region.origin_y}.wsfm"


def region_record_file(features_dir: Path, region: Region) -> Path:
    """Sidecar holding {content_hash, sha256} for one finished region."""
    return region_file(features_dir, region).with_suffix(".json")


def _write_record(path: Path, entry: Dict[str, str]):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(entry, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _load_record(path: Path) -> Optional[Dict[str, str]]:
    if not path.exists():
        return None
    try:
        entry = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        log.warning("ignoring unreadable region record %s", path)
        return None
    return entry if isinstance(entry, dict) else None


def _load_index(features_dir: Path) -> Dict[str, Any]:
    path = features_dir / INDEX_FILE
    if not path.exists():
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f).get("regions", {})
    except (json.JSONDecodeError, AttributeError):
        log.warning("ignoring unreadable feature index %s", path)
        return {}


def _reusable(path: Path, entry: Optional[Dict[str, str]], content_hash: str) -> Optional[FeatureMatrix]:
    """The stored region feature, if it is intact and was computed from the same content."""
    if not entry or entry.get("content_hash") != content_hash or not path.exists():
        return None
    try:
        matrix = read_feature_matrix(path)
    except CorruptFileError as e:
        log.warning("re-encoding region: %s", e)
        return None
    if hashlib.sha256(path.read_bytes()).hexdigest() != entry.get("sha256"):
        log.warning("re-encoding region: checksum mismatch for %s", path)
        return None
    return matrix


def encode_region(
    slide: SlideRaster,
    manifest: TileManifest,
    region: Region,
    enc_a: EncoderSpec,
    enc_b: Optional[EncoderSpec],
    aggregation_mode: str,
) -> FeatureMatrix:
    """Encode the 21 tiles of one region and average-pool them into one REGION row."""
    tiles = []
    for tile in manifest.region_tiles(region):
        try:
            tiles.append(read_window(
                slide, region.origin_x + tile.offset_x, region.origin_y + tile.offset_y, tile.width, tile.height
            ))
        except BoundsError as e:
            raise ManifestMismatchError(f"manifest does not fit slide {slide.slide_id}: {e}") from e
    vector = aggregate_region(encode_tiles(tiles, enc_a, enc_b), mode=aggregation_mode)
    return FeatureMatrix.from_array(vector, Provenance.REGION)


def cmd_encode(config: PipelineConfig) -> Dict[str, Any]:
    """
    Encode every manifest region into per-region feature files plus the
    combined region feature matrix.

    Completed regions are skipped when their stored file is intact and their
    content hash (region pixels + encoder settings) is unchanged.

    Returns:
        Summary with region_count, encoded, skipped, feature_dim and the
        combined features path

    Raises:
        ManifestMismatchError: If the manifest does not belong to the slide
        EmptyInputError: If the manifest holds no regions
    """
    logger = get_logger()
    start_time = time.time()
    slide_id = None

    try:
        manifest = read_manifest(config.require_file(config.manifest_file, "manifest_path"))
        slide = resolve_slide(config)
        slide_id = slide.slide_id
        if not manifest.regions:
            raise EmptyInputError(f"manifest {config.manifest_file} holds no regions")
        if manifest.slide_id != slide.slide_id:
            raise ManifestMismatchError(
                f"manifest is for slide {manifest.slide_id}, configured slide is {slide.slide_id}"
            )

        enc_a, enc_b = build_encoders(config)
        fingerprint = encoder_fingerprint(config)
        features_dir = config.features_dir
        index = _load_index(features_dir)

        def process(region: Region) -> Tuple[FeatureMatrix, Dict[str, str], bool]:
            key = f"{region.origin_x}_{region.origin_y}"
            path = region_file(features_dir, region)
            content_hash = region_content_hash(slide, region, fingerprint)
            record_path = region_record_file(features_dir, region)
            entry = _load_record(record_path) or index.get(key)
            stored = _reusable(path, entry, content_hash)
            if stored is not None:
                return stored, entry, True
            matrix = encode_region(slide, manifest, region, enc_a, enc_b, config.aggregation_mode)
            entry = {"content_hash": content_hash, "sha256": write_feature_matrix(matrix, path)}
            # the record follows the region file
            _write_record(record_path, entry)
            return matrix, entry, False

        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as executor:
                results = list(executor.map(process, manifest.regions))
        else:
            results = [process(region) for region in manifest.regions]

        combined = stack_region_features([matrix.data[0] for matrix, _, _ in results])
        write_feature_matrix(combined, config.region_features_file)

        new_index = {
            f"{region.origin_x}_{region.origin_y}": entry
            for region, (_, entry, _) in zip(manifest.regions, results)
        }
        with open(features_dir / INDEX_FILE, 'w', encoding='utf-8') as f:
            json.dump({"slide_id": slide.slide_id, "feature_dim": combined.dim, "regions": new_index},
                      f, indent=2, sort_keys=True)

        skipped = sum(1 for _, _, reused in results if reused)
        summary = {
            "slide_id": slide_id,
            "region_count": combined.rows,
            "encoded": combined.rows - skipped,
            "skipped": skipped,
            "feature_dim": combined.dim,
            "features": str(config.region_features_file),
        }
        logger.log_encoding(
            slide_id=slide_id,
            duration=time.time() - start_time,
            encoded_regions=summary["encoded"],
            skipped_regions=skipped,
            feature_dim=combined.dim,
        )
        return summary

    except Exception as e:
        logger.log_step(
            step_name="encode",
            slide_id=slide_id,
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
