"""Configuration for wsikit pipeline runs.

Values are layered: flat key=value config file < WSIKIT_<KEY> environment
variables < command-line overrides. List-valued keys are comma separated.
"""
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from wsikit.errors import ConfigError
from wsikit.prompts.templates import DEFAULT_PROMPT_TEMPLATES, get_class_names

ENV_PREFIX = "WSIKIT_"

DEFAULT_PROBE_SHOTS = [2, 8, 16, 32, 64, 128]


class PipelineConfig(BaseModel):
    """All knobs of a pipeline run, range-checked on construction"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Paths
    slide_path: Optional[Path] = None
    work_dir: Path = Path("wsikit_out")
    manifest_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None

    # Synthetic slide used when no slide_path is given
    synthetic_width: int = Field(8192, ge=512)
    synthetic_height: int = Field(8192, ge=512)
    synthetic_blobs: int = Field(3, ge=0)
    synthetic_blob_radius_min: int = Field(600, ge=1)
    synthetic_blob_radius_max: int = Field(1800, ge=1)
    magnification: float = Field(40.0, gt=0)

    # Tissue tiler
    downsample_factor: int = Field(32, ge=1, le=2048)
    saturation_threshold: float = Field(0.08, ge=0.0, lt=1.0)
    min_tissue_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    boundary_policy: Literal["discard"] = "discard"

    # Patch encoders (desk-scale stand-ins for the two vision towers)
    encoder_a_dim: int = Field(64, ge=1)
    encoder_b_dim: int = Field(32, ge=0)
    encoder_input_size: int = Field(224, ge=8)
    encoder_a_seed: int = Field(1, ge=0)
    encoder_b_seed: int = Field(2, ge=0)
    aggregation_mode: Literal["mean", "scale_balanced"] = "mean"

    # Token compressor
    compressor_queries: int = Field(1152, ge=1)
    compressor_heads: int = Field(8, ge=1)
    compressor_model_dim: int = Field(64, ge=1)

    # Zero-shot
    temperature: float = Field(0.07, gt=0)
    class_names: List[str] = Field(default_factory=lambda: ["tumor", "normal"])
    # Named dataset whose class names replace class_names
    zeroshot_dataset: Optional[str] = None
    prompt_templates: List[str] = Field(default_factory=lambda: list(DEFAULT_PROMPT_TEMPLATES))
    text_encoder_seed: int = Field(3, ge=0)
    zeroshot_features: Optional[Path] = None
    labels_path: Optional[Path] = None
    balanced_accuracy: bool = False

    # Linear probe
    probe_features: Optional[Path] = None
    probe_labels: Optional[Path] = None
    probe_dataset: str = "synthetic"
    probe_shots: List[int] = Field(default_factory=lambda: list(DEFAULT_PROBE_SHOTS))
    probe_seeds: int = Field(10, ge=1)

    # MIL head
    mil_bags_dir: Optional[Path] = None
    mil_labels: Optional[Path] = None
    mil_epochs: int = Field(20, ge=1)
    mil_lr: float = Field(1e-5, ge=0.0)

    # Text metrics
    candidates_path: Optional[Path] = None
    references_path: Optional[Path] = None
    rouge_beta: float = Field(1.2, gt=0)

    # Run control
    stage: int = Field(4, ge=1, le=4)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1, le=256)
    verbose: bool = False

    @field_validator("class_names", "prompt_templates", mode="before")
    @classmethod
    def split_string_list(cls, v):
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    @field_validator("prompt_templates")
    @classmethod
    def one_slot_per_template(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("prompt_templates must not be empty")
        for template in v:
            if template.count("{}") != 1:
                raise ValueError(f"prompt template must contain exactly one '{{}}' slot: {template!r}")
        return v

    @field_validator("zeroshot_dataset")
    @classmethod
    def known_dataset(cls, v: Optional[str]) -> Optional[str]:
        if v is not None:
            get_class_names(v)
        return v

    @field_validator("probe_shots", mode="before")
    @classmethod
    def split_int_list(cls, v):
        if isinstance(v, str):
            return [int(item) for item in v.split(",") if item.strip()]
        return v

    @field_validator("probe_shots")
    @classmethod
    def shots_sorted(cls, v: List[int]) -> List[int]:
        if not v or any(s < 1 for s in v) or v != sorted(v):
            raise ValueError("probe_shots must be positive and sorted ascending")
        return v

    @model_validator(mode="after")
    def check_ranges(self):
        if self.synthetic_blob_radius_min > self.synthetic_blob_radius_max:
            raise ValueError("synthetic_blob_radius_min exceeds synthetic_blob_radius_max")
        if self.compressor_model_dim % self.compressor_heads != 0:
            raise ValueError("compressor_model_dim must be divisible by compressor_heads")
        if not self.class_names:
            raise ValueError("class_names must not be empty")
        return self

    # Derived locations
    @property
    def manifest_file(self) -> Path:
        return self.manifest_path or self.work_dir / "manifest.jsonl"

    @property
    def features_dir(self) -> Path:
        return self.work_dir / "features"

    @property
    def region_features_file(self) -> Path:
        return self.features_dir / "region_features.wsfm"

    @property
    def compressed_file(self) -> Path:
        return self.work_dir / "compressed.wsfm"

    @property
    def zeroshot_class_names(self) -> List[str]:
        if self.zeroshot_dataset is not None:
            return get_class_names(self.zeroshot_dataset)
        return list(self.class_names)

    @property
    def checkpoint_file(self) -> Path:
        return self.checkpoint_path or self.work_dir / "compressor.ckpt"

    @property
    def results_dir(self) -> Path:
        return self.work_dir / "results"

    def require_file(self, path: Optional[Path], key: str) -> Path:
        """
        Resolve a configured input path, failing early when it is absent.

        Raises:
            ConfigError: If the key is unset or the file does not exist
        """
        if path is None:
            raise ConfigError(f"'{key}' is not configured")
        if not Path(path).exists():
            raise ConfigError(f"'{key}' points to a missing file: {path}")
        return Path(path)


def load_config(
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """
    Build a PipelineConfig from file, environment and explicit overrides.

    Args:
        config_path: Optional flat key=value config file
        overrides: Highest-priority values (e.g. CLI flags); None values are ignored
        environ: Environment mapping (default: os.environ)

    Returns:
        Validated PipelineConfig

    Raises:
        ConfigError: On a missing config file, unknown keys or invalid values
    """
    environ = os.environ if environ is None else environ
    fields = PipelineConfig.model_fields
    values: Dict[str, Any] = {}

    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        for key, value in dotenv_values(config_path).items():
            if value is not None:
                values[key.strip().lower()] = value

    for name in fields:
        env_value = environ.get(f"{ENV_PREFIX}{name.upper()}")
        if env_value is not None:
            values[name] = env_value

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}. Available: {sorted(fields)}")

    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
