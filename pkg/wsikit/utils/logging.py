"""
Logging utility module for wsikit metrics collection.
Provides structured logging for all steps in the slide processing pipeline.
"""
import logging
import os
import json
from typing import Dict, Any, Optional
from datetime import datetime
from pathlib import Path


CONSOLE_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def _handler(handler: logging.Handler, fmt: str) -> logging.Handler:
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(fmt))
    return handler


class MetricsLogger:
    """Logger for collecting metrics at each step of the slide pipeline"""

    def __init__(self, log_dir: Optional[str] = None, verbose: bool = False):
        """
        Set up the JSONL step log.

        Args:
            log_dir: Directory for step logs (default: $WSIKIT_LOG_DIR or "logs")
            verbose: Emit DEBUG records from wsikit.* on the console
        """
        self.log_dir = Path(log_dir or os.getenv("WSIKIT_LOG_DIR", "logs"))
        self.log_dir.mkdir(parents=True, exist_ok=True)

        self.logger = logging.getLogger("wsikit.metrics")
        self.logger.setLevel(logging.INFO)

        # handlers are process-wide; the first instance owns them
        if not self.logger.handlers:
            steps_file = self.log_dir / f"steps_{datetime.now():%Y%m%d}.jsonl"
            self.logger.addHandler(_handler(logging.FileHandler(steps_file, encoding="utf-8"), "%(message)s"))
            self.logger.addHandler(_handler(logging.StreamHandler(), CONSOLE_FORMAT))

        self.set_verbose(verbose)

    def set_verbose(self, verbose: bool):
        """Switch library loggers (wsikit.*) between DEBUG and WARNING"""
        package_logger = logging.getLogger("wsikit")
        package_logger.setLevel(logging.DEBUG if verbose else logging.WARNING)
        if verbose and not package_logger.handlers:
            package_logger.addHandler(_handler(logging.StreamHandler(), CONSOLE_FORMAT))
            package_logger.handlers[-1].setLevel(logging.DEBUG)

    def log_step(self,
                 step_name: str,
                 slide_id: Optional[str] = None,
                 duration: Optional[float] = None,
                 input_data: Optional[Dict[str, Any]] = None,
                 output_data: Optional[Dict[str, Any]] = None,
                 metrics: Optional[Dict[str, Any]] = None,
                 error: Optional[str] = None):
        """
        Log a pipeline step with metrics

        Args:
            step_name: Name of the step (e.g., 'tile', 'encode')
            slide_id: Optional identifier of the slide being processed
            duration: Time taken for this step in seconds
            input_data: Input data for this step
            output_data: Output data from this step
            metrics: Additional metrics dictionary
            error: Error message if step failed
        """
        log_entry = {
            "timestamp": datetime.now().isoformat(),
            "step": step_name,
            "slide_id": slide_id,
            "duration_seconds": duration,
            "input": input_data,
            "output": output_data,
            "metrics": metrics or {},
            "error": error,
            "success": error is None
        }

        self.logger.info(json.dumps(log_entry, ensure_ascii=False, default=str))

    def log_tiling(self,
                   slide_id: str,
                   duration: float,
                   region_count: int,
                   tile_count: int,
                   mean_tissue_fraction: float):
        """Log tissue segmentation and region planning"""
        self.log_step(
            step_name="tile",
            slide_id=slide_id,
            duration=duration,
            output_data={
                "region_count": region_count,
                "tile_count": tile_count
            },
            metrics={
                "mean_tissue_fraction": mean_tissue_fraction
            }
        )

    def log_encoding(self,
                     slide_id: str,
                     duration: float,
                     encoded_regions: int,
                     skipped_regions: int,
                     feature_dim: int):
        """Log tile encoding and region aggregation"""
        self.log_step(
            step_name="encode",
            slide_id=slide_id,
            duration=duration,
            output_data={"feature_dim": feature_dim},
            metrics={
                "encoded_regions": encoded_regions,
                "skipped_regions": skipped_regions
            }
        )

    def log_compression(self,
                        slide_id: str,
                        duration: float,
                        input_rows: int,
                        output_rows: int):
        """Log token compression"""
        self.log_step(
            step_name="compress",
            slide_id=slide_id,
            duration=duration,
            metrics={
                "input_rows": input_rows,
                "output_rows": output_rows
            }
        )

    def log_evaluation(self,
                       step_name: str,
                       duration: float,
                       results: Dict[str, Any],
                       slide_id: Optional[str] = None):
        """Log an evaluation protocol (zeroshot, probe, mil, metrics)"""
        self.log_step(
            step_name=step_name,
            slide_id=slide_id,
            duration=duration,
            output_data=results
        )

    def log_pipeline_complete(self,
                              slide_id: str,
                              total_duration: float,
                              final_result: Dict[str, Any]):
        """Log completion of entire pipeline"""
        self.log_step(
            step_name="pipeline_complete",
            slide_id=slide_id,
            duration=total_duration,
            output_data=final_result,
            metrics={
                "total_duration": total_duration,
                "region_count": final_result.get("region_count", 0)
            }
        )


# Process-wide instance
_metrics_logger = None


def get_logger() -> MetricsLogger:
    """Get or create the global metrics logger instance"""
    global _metrics_logger
    if _metrics_logger is None:
        _metrics_logger = MetricsLogger()
    return _metrics_logger
