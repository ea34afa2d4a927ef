"""Prompt templates for zero-shot classification."""

from .templates import DEFAULT_PROMPT_TEMPLATES, DATASET_CLASS_NAMES, get_class_names

__all__ = [
    "DEFAULT_PROMPT_TEMPLATES",
    "DATASET_CLASS_NAMES",
    "get_class_names",
]
