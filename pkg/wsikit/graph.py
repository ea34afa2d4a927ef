from typing import Any, Dict, Optional, TypedDict
import time

from langgraph.graph import StateGraph, START, END

from wsikit.utils.config import PipelineConfig
from wsikit.utils.logging import get_logger


class PipelineState(TypedDict):
    """State for the end-to-end slide pipeline"""
    # Input
    config: PipelineConfig

    # Step outputs
    tile: Optional[Dict[str, Any]]
    encode: Optional[Dict[str, Any]]
    compress: Optional[Dict[str, Any]]
    zeroshot: Optional[Dict[str, Any]]


def create_graph() -> StateGraph:
    """
    Create the tile -> encode -> compress -> zeroshot pipeline graph.

    The run stops after tiling when no region is retained.

    Returns:
        Compiled StateGraph instance
    """
    from .nodes.tile import cmd_tile
    from .nodes.encode import cmd_encode
    from .nodes.compress import cmd_compress
    from .nodes.zeroshot import cmd_zeroshot

    graph = StateGraph(PipelineState)

    graph.add_node("tile", lambda state: {"tile": cmd_tile(state["config"])})
    graph.add_node("encode", lambda state: {"encode": cmd_encode(state["config"])})
    graph.add_node("compress", lambda state: {"compress": cmd_compress(state["config"])})
    graph.add_node("zeroshot", lambda state: {"zeroshot": cmd_zeroshot(state["config"])})

    def after_tile(state: PipelineState) -> str:
        return "encode" if state["tile"]["region_count"] > 0 else END

    graph.add_edge(START, "tile")
    graph.add_conditional_edges("tile", after_tile, ["encode", END])
    graph.add_edge("encode", "compress")
    graph.add_edge("compress", "zeroshot")
    graph.add_edge("zeroshot", END)

    compiled_graph = graph.compile()

    # Wrap the invoke method to add logging
    original_invoke = compiled_graph.invoke

    def invoke_with_logging(state_or_input: dict, config: Optional[dict] = None):
        """Invoke graph with logging"""
        logger = get_logger()
        start_time = time.time()

        try:
            result = original_invoke(state_or_input, config)

            tile = result.get("tile") or {}
            logger.log_pipeline_complete(
                slide_id=tile.get("slide_id"),
                total_duration=time.time() - start_time,
                final_result={
                    "region_count": tile.get("region_count", 0),
                    "compressed_rows": (result.get("compress") or {}).get("output_rows"),
                    "overall_accuracy": (result.get("zeroshot") or {}).get("overall_accuracy"),
                },
            )
            return result

        except Exception as e:
            logger.log_step(
                step_name="pipeline_complete",
                duration=time.time() - start_time,
                error=str(e),
            )
            raise

    compiled_graph.invoke = invoke_with_logging
    return compiled_graph
