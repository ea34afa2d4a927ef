"""Utility modules for wsikit"""
from .logging import get_logger, MetricsLogger
from .config import PipelineConfig, load_config

__all__ = ['get_logger', 'MetricsLogger', 'PipelineConfig', 'load_config']
