"""
Four-stage training plan: tunable parameter groups, per-group learning rates,
cosine schedules with warmup and the stage-4 patch/WSI mixing sampler.

The trainable model here is a desk-scale stand-in whose four submodules carry
the parameter-group names, so freezing, per-group rates and checkpointing are
exercised end to end without the real towers or language model.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from transformers import get_cosine_schedule_with_warmup

from wsikit.compressor import TokenCompressor
from wsikit.encoders import Projector
from wsikit.errors import EmptyPoolError, FrozenGroupError, InputError, InvalidStageError

logger = logging.getLogger(__name__)

GROUP_NAMES = ("vision_tower", "projector_mlp", "wsi_projector", "llm_body")
GroupName = Literal["vision_tower", "projector_mlp", "wsi_projector", "llm_body"]

# Which sampling pool each training source draws from
SOURCE_POOLS = {
    "patch_caption": "patch",
    "patch_instruction": "patch",
    "wsi_report": "wsi",
    "wsi_instruction": "wsi",
}

STAGE4_PATCH_FRACTION = 0.15

# Per-stage hyper-parameters
STAGE_HPARAMS = {
    1: {
        "groups": {"projector_mlp": 1e-3},
        "epochs": 1,
        "warmup_ratio": 0.03,
        "per_device_batch_size": 16,
        "grad_accum_steps": 1,
        "model_max_length": 8192,
        "image_aspect": "square",
        "data_mix": {"patch_caption": 1.0},
    },
    2: {
        "groups": {"vision_tower": 2e-6, "projector_mlp": 1e-5, "llm_body": 1e-5},
        "epochs": 1,
        "warmup_ratio": 0.03,
        "per_device_batch_size": 1,
        "grad_accum_steps": 8,
        "model_max_length": 32768,
        "image_aspect": "anyres",
        "data_mix": {"patch_instruction": 1.0},
    },
    3: {
        "groups": {"wsi_projector": 5e-6},
        "epochs": 1,
        "warmup_ratio": 0.1,
        "per_device_batch_size": 16,
        "grad_accum_steps": 1,
        "model_max_length": 8192,
        "image_aspect": "square",
        "data_mix": {"wsi_report": 1.0},
    },
    4: {
        "groups": {"vision_tower": 2e-6, "projector_mlp": 1e-5, "wsi_projector": 1e-5, "llm_body": 1e-5},
        "epochs": 5,
        "warmup_ratio": 0.1,
        "per_device_batch_size": 1,
        "grad_accum_steps": 8,
        "model_max_length": 32768,
        "image_aspect": "anyres",
        "data_mix": {"patch_instruction": STAGE4_PATCH_FRACTION, "wsi_instruction": 1.0 - STAGE4_PATCH_FRACTION},
    },
}

# Contrastive pretraining of the patch/text towers
ALIGNMENT_HPARAMS = {
    "epochs": 5,
    "learning_rate": 3e-5,
    "per_device_batch_size": 64,
    "grad_accum_steps": 1,
    "weight_decay": 0.1,
    "warmup_steps": 300,
}


class ParamGroup(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: GroupName
    learning_rate: float = Field(0.0, ge=0.0)
    frozen: bool = True


class StagePlan(BaseModel):
    """Immutable freeze/learning-rate assignment of one training stage"""

    model_config = ConfigDict(frozen=True)

    stage: int = Field(..., ge=1, le=4)
    groups: List[ParamGroup]
    epochs: int = Field(..., ge=1)
    warmup_ratio: float = Field(..., ge=0.0, le=1.0)
    lr_schedule: Literal["cosine"] = "cosine"
    data_mix: Dict[str, float]
    per_device_batch_size: int = Field(1, ge=1)
    grad_accum_steps: int = Field(1, ge=1)
    weight_decay: float = Field(0.0, ge=0.0)
    model_max_length: int = 8192
    image_aspect: Literal["square", "anyres"] = "square"

    @model_validator(mode="after")
    def check_mix(self):
        if abs(sum(self.data_mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"data_mix fractions must sum to 1, got {sum(self.data_mix.values())}")
        unknown = set(self.data_mix) - set(SOURCE_POOLS)
        if unknown:
            raise ValueError(f"Unknown data sources: {sorted(unknown)}")
        return self

    @property
    def trainable(self) -> Dict[str, float]:
        return {g.name: g.learning_rate for g in self.groups if not g.frozen}

    @property
    def patch_fraction(self) -> float:
        return sum(f for source, f in self.data_mix.items() if SOURCE_POOLS[source] == "patch")

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise InputError(f"Unknown parameter group: {name}. Available groups: {list(GROUP_NAMES)}")

    def warmup_steps(self, total_steps: int) -> int:
        return math.ceil(self.warmup_ratio * total_steps)


class AlignmentPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int
    learning_rate: float
    per_device_batch_size: int
    grad_accum_steps: int
    weight_decay: float
    warmup_steps: int
    lr_schedule: Literal["cosine"] = "cosine"


def build_stage_plan(stage: int) -> StagePlan:
    """
    Build the plan of one training stage.

    Args:
        stage: Stage number 1..4

    Returns:
        StagePlan listing all four groups, trainable ones with their rates

    Raises:
        InvalidStageError: If stage is not in 1..4
    """
    if stage not in STAGE_HPARAMS:
        raise InvalidStageError(f"Unknown stage: {stage}. Available stages: {sorted(STAGE_HPARAMS)}")
    hparams = dict(STAGE_HPARAMS[stage])
    rates = hparams.pop("groups")
    groups = [
        ParamGroup(name=name, learning_rate=rates.get(name, 0.0), frozen=name not in rates)
        for name in GROUP_NAMES
    ]
    return StagePlan(stage=stage, groups=groups, **hparams)


def build_alignment_plan() -> AlignmentPlan:
    return AlignmentPlan(**ALIGNMENT_HPARAMS)


def lr_at(plan: StagePlan, group: Union[ParamGroup, str], step: int, total_steps: int) -> float:
    """
    Learning rate of a group at a step: linear warmup, then cosine decay to 0.

    Raises:
        FrozenGroupError: If the group is frozen in this stage
        InputError: If step is outside [0, total_steps]
    """
    group = plan.group(group) if isinstance(group, str) else group
    if group.frozen:
        raise FrozenGroupError(f"group {group.name} is frozen in stage {plan.stage}")
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")

    warmup = plan.warmup_steps(total_steps)
    if step < warmup:
        return group.learning_rate * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return group.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MixSampler:
    """
    Draws (source, index) pairs from a patch pool and a WSI pool.

    mode="probability" makes every slot an independent draw with
    P(patch) = patch_fraction; mode="quota" fixes round(patch_fraction * batch)
    patch slots per batch at random positions.
    """
    seed: int
    patch_pool_size: int
    wsi_pool_size: int
    patch_fraction: float = STAGE4_PATCH_FRACTION
    mode: Literal["probability", "quota"] = "probability"
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.patch_fraction <= 1.0:
            raise InputError(f"patch_fraction must be in [0, 1], got {self.patch_fraction}")
        if self.patch_pool_size < 0 or self.wsi_pool_size < 0:
            raise InputError("pool sizes must be nonnegative")
        if self.mode not in ("probability", "quota"):
            raise InputError(f"Unknown mix mode: {self.mode}")
        self.rng = np.random.default_rng(self.seed)

    def for_shard(self, shard_index: int, num_shards: int) -> "MixSampler":
        """Independent sampler for one data-loader shard, seeded from this sampler's seed."""
        if not 0 <= shard_index < num_shards:
            raise InputError(f"shard {shard_index} outside [0, {num_shards})")
        child = np.random.SeedSequence(self.seed).spawn(num_shards)[shard_index]
        return MixSampler(
            seed=int(child.generate_state(1)[0]),
            patch_pool_size=self.patch_pool_size,
            wsi_pool_size=self.wsi_pool_size,
            patch_fraction=self.patch_fraction,
            mode=self.mode,
        )


def sample_mixed_batch(sampler: MixSampler, batch_size: int) -> List[Tuple[str, int]]:
    """
    Draw one batch of (source, index) pairs, source in {"patch", "wsi"}.

    Raises:
        EmptyPoolError: If a slot draws from an empty pool
    """
    rng = sampler.rng
    if sampler.mode == "quota":
        is_patch = np.zeros(batch_size, dtype=bool)
        is_patch[:round(sampler.patch_fraction * batch_size)] = True
        rng.shuffle(is_patch)
    else:
        is_patch = rng.random(batch_size) < sampler.patch_fraction

    num_patch = int(is_patch.sum())
    if num_patch and sampler.patch_pool_size == 0:
        raise EmptyPoolError("patch pool is empty")
    if num_patch < batch_size and sampler.wsi_pool_size == 0:
        raise EmptyPoolError("WSI pool is empty")

    patch_indices = rng.integers(0, max(1, sampler.patch_pool_size), size=batch_size)
    wsi_indices = rng.integers(0, max(1, sampler.wsi_pool_size), size=batch_size)
    return [
        ("patch", int(p)) if flag else ("wsi", int(w))
        for flag, p, w in zip(is_patch, patch_indices, wsi_indices)
    ]


class DeskOmniModel(nn.Module):
    """Stand-in model with one submodule per parameter group"""

    def __init__(self,
                 feature_dim: int = 16,
                 hidden_dim: int = 32,
                 num_classes: int = 2,
                 num_queries: int = 8,
                 num_heads: int = 4,
                 seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.vision_tower = nn.Linear(feature_dim, feature_dim)
            self.projector_mlp = Projector(feature_dim, hidden_dim, hidden_dim)
            self.wsi_projector = TokenCompressor(feature_dim, hidden_dim, num_heads, num_queries, seed=seed)
            self.llm_body = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, num_classes))

    def forward_patch(self, features: torch.Tensor) -> torch.Tensor:
        """(B, feature_dim) patch features -> (B, num_classes) logits."""
        return self.llm_body(self.projector_mlp(self.vision_tower(features)))

    def forward_wsi(self, regions: torch.Tensor) -> torch.Tensor:
        """(N, feature_dim) region features of one slide -> (num_classes,) logits."""
        tokens = self.wsi_projector(self.vision_tower(regions))
        return self.llm_body(tokens.mean(dim=0))


def apply_stage_plan(model: DeskOmniModel, plan: StagePlan) -> torch.optim.AdamW:
    """
    Freeze the stage's frozen groups and build an AdamW optimizer with one
    param group per trainable group at its own learning rate.
    """
    param_groups = []
    for group in plan.groups:
        module: nn.Module = getattr(model, group.name)
        module.requires_grad_(not group.frozen)
        if not group.frozen:
            param_groups.append({"params": list(module.parameters()), "lr": group.learning_rate, "name": group.name})
    return torch.optim.AdamW(param_groups, weight_decay=plan.weight_decay)


@dataclass
class DeskPools:
    """Labelled patch features and WSI region bags"""
    patch_features: torch.Tensor
    patch_labels: torch.Tensor
    wsi_bags: List[torch.Tensor]
    wsi_labels: torch.Tensor


def make_desk_pools(
    feature_dim: int = 16,
    patch_count: int = 64,
    wsi_count: int = 16,
    regions_per_slide: Tuple[int, int] = (3, 12),
    seed: int = 0,
) -> DeskPools:
    """Two-class synthetic pools whose class shifts the feature mean."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(feature_dim)
    patch_labels = rng.integers(0, 2, size=patch_count)
    patches = rng.standard_normal((patch_count, feature_dim)) + np.outer(2 * patch_labels - 1, direction)
    wsi_labels = rng.integers(0, 2, size=wsi_count)
    bags = [
        torch.from_numpy(
            (rng.standard_normal((int(rng.integers(*regions_per_slide)), feature_dim)) + (2 * y - 1) * direction)
            .astype(np.float32)
        )
        for y in wsi_labels
    ]
    return DeskPools(
        patch_features=torch.from_numpy(patches.astype(np.float32)),
        patch_labels=torch.from_numpy(patch_labels),
        wsi_bags=bags,
        wsi_labels=torch.from_numpy(wsi_labels),
    )


@dataclass
class StageRun:
    stage: int
    steps: int
    losses: List[float]
    learning_rates: List[Dict[str, float]]


def train_stage(
    model: DeskOmniModel,
    plan: StagePlan,
    pools: DeskPools,
    total_steps: int,
    seed: int = 0,
    mode: Literal["probability", "quota"] = "probability",
) -> StageRun:
    """
    Run total_steps optimizer steps of one stage on the desk pools.

    Each step accumulates plan.grad_accum_steps micro-batches of
    plan.per_device_batch_size samples drawn by the stage's MixSampler.

    Returns:
        StageRun with per-step loss and per-group learning rates
    """
    optimizer = apply_stage_plan(model, plan)
    scheduler = get_cosine_schedule_with_warmup(optimizer, plan.warmup_steps(total_steps), total_steps)
    sampler = MixSampler(
        seed=seed,
        patch_pool_size=len(pools.patch_labels),
        wsi_pool_size=len(pools.wsi_bags),
        patch_fraction=plan.patch_fraction,
        mode=mode,
    )

    model.train()
    losses, rates = [], []
    for step in range(total_steps):
        rates.append({g["name"]: g["lr"] for g in optimizer.param_groups})
        optimizer.zero_grad()
        step_loss = 0.0
        for _ in range(plan.grad_accum_steps):
            batch = sample_mixed_batch(sampler, plan.per_device_batch_size)
            loss = torch.stack([_sample_loss(model, pools, source, index) for source, index in batch]).mean()
            (loss / plan.grad_accum_steps).backward()
            step_loss += float(loss) / plan.grad_accum_steps
        optimizer.step()
        scheduler.step()
        losses.append(step_loss)
        logger.debug("stage %d step %d loss %.4f", plan.stage, step, step_loss)
    return StageRun(stage=plan.stage, steps=total_steps, losses=losses, learning_rates=rates)


def _sample_loss(model: DeskOmniModel, pools: DeskPools, source: str, index: int) -> torch.Tensor:
    if source == "patch":
        logits = model.forward_patch(pools.patch_features[index:index + 1])[0]
        target = pools.patch_labels[index]
    else:
        logits = model.forward_wsi(pools.wsi_bags[index])
        target = pools.wsi_labels[index]
    return F.cross_entropy(logits.unsqueeze(0), target.view(1))


def save_stage_checkpoint(model: nn.Module, path: Union[str, Path], stage: int, step: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"stage": stage, "step": step, "state_dict": model.state_dict()}, path)
    return path


def load_stage_checkpoint(model: nn.Module, path: Union[str, Path]) -> Tuple[int, int]:
    """Load weights into model; returns the (stage, step) tag."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    model.load_state_dict(payload["state_dict"])
    return int(payload["stage"]), int(payload["step"])


def render_stage_report(plans: Optional[Sequence[StagePlan]] = None) -> str:
    """Human-readable JSON audit of stage plans (all four by default)."""
    plans = plans if plans is not None else [build_stage_plan(s) for s in sorted(STAGE_HPARAMS)]
    report = {
        "stages": [
            {
                **plan.model_dump(exclude={"groups"}),
                "trainable": plan.trainable,
                "frozen": [g.name for g in plan.groups if g.frozen],
            }
            for plan in plans
        ],
        "alignment": build_alignment_plan().model_dump(),
    }
    return json.dumps(report, indent=2)
