import time
from typing import Any, Dict

from wsikit.compressor import TokenCompressor, compress, load_compressor, save_compressor
from wsikit.features import read_feature_matrix, write_feature_matrix
from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


def resolve_compressor(config: PipelineConfig, in_dim: int) -> TokenCompressor:
    """
    Load the configured checkpoint, or initialize a seeded compressor and
    write it to the work directory checkpoint.
    """
    if config.checkpoint_path is not None:
        return load_compressor(config.require_file(config.checkpoint_path, "checkpoint_path")).state
    state = TokenCompressor(
        in_dim,
        model_dim=config.compressor_model_dim,
        num_heads=config.compressor_heads,
        num_queries=config.compressor_queries,
        seed=config.seed,
    )
    save_compressor(state, config.checkpoint_file, stage=config.stage, step=0)
    return state


def cmd_compress(config: PipelineConfig) -> Dict[str, Any]:
    """
    Compress the region feature matrix to the fixed-length token set.

    Returns:
        Summary with input_rows, output_rows, dim and output path
    """
    logger = get_logger()
    start_time = time.time()

    try:
        features = read_feature_matrix(config.require_file(config.region_features_file, "region_features"))
        state = resolve_compressor(config, features.dim)
        compressed = compress(state, features)
        write_feature_matrix(compressed, config.compressed_file)

        summary = {
            "input_rows": features.rows,
            "output_rows": compressed.rows,
            "dim": compressed.dim,
            "compressed": str(config.compressed_file),
        }
        logger.log_compression(
            slide_id=None,
            duration=time.time() - start_time,
            input_rows=features.rows,
            output_rows=compressed.rows,
        )
        return summary

    except Exception as e:
        logger.log_step(
            step_name="compress",
            duration=time.time() - start_time,
            error=str(e),
        )
        raise
