"""
Contrastive image-text alignment and prompt-ensemble zero-shot classification.

The loss is the symmetric InfoNCE objective over L2-normalized embeddings
with a fixed temperature. Zero-shot class prototypes average the normalized
embeddings of every filled template and re-normalize.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator

from wsikit.errors import DimensionMismatchError, EmptyInputError, InvalidBatchError
from wsikit.features import FeatureMatrix
from wsikit.prompts.templates import DEFAULT_PROMPT_TEMPLATES
from wsikit.text_metrics import tokenize
from wsikit.utils.scoring import accuracy, balanced_accuracy, per_class_accuracy

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07

TextEncoder = Callable[[str], np.ndarray]


def _as_array(values) -> np.ndarray:
    return values.data if isinstance(values, FeatureMatrix) else np.asarray(values)


@dataclass(eq=False)
class AlignmentBatch:
    """Matched image/text embedding rows with a temperature"""
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.image_embeddings = np.asarray(_as_array(self.image_embeddings), dtype=np.float64)
        self.text_embeddings = np.asarray(_as_array(self.text_embeddings), dtype=np.float64)
        if self.temperature <= 0:
            raise InvalidBatchError(f"temperature must be positive, got {self.temperature}")
        if self.image_embeddings.ndim != 2 or self.image_embeddings.shape != self.text_embeddings.shape:
            raise InvalidBatchError(
                f"image {self.image_embeddings.shape} and text {self.text_embeddings.shape} embeddings must match"
            )
        if self.image_embeddings.shape[0] < 2:
            raise InvalidBatchError("contrastive loss needs at least 2 pairs")


def info_nce(image: torch.Tensor, text: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropy."""
    image = F.normalize(image, dim=-1)
    text = F.normalize(text, dim=-1)
    logits = image @ text.T / temperature
    targets = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


@dataclass
class ContrastiveResult:
    loss: float
    grad_image: np.ndarray
    grad_text: np.ndarray


def contrastive_loss(batch: AlignmentBatch) -> ContrastiveResult:
    """Loss and exact gradients w.r.t. both (unnormalized) embedding matrices."""
    image = torch.tensor(batch.image_embeddings, requires_grad=True)
    text = torch.tensor(batch.text_embeddings, requires_grad=True)
    loss = info_nce(image, text, batch.temperature)
    grad_image, grad_text = torch.autograd.grad(loss, [image, text])
    return ContrastiveResult(loss=float(loss), grad_image=grad_image.numpy(), grad_text=grad_text.numpy())


class PromptTemplateSet(BaseModel):
    templates: List[str] = Field(default_factory=lambda: list(DEFAULT_PROMPT_TEMPLATES))
    class_names: List[str]

    @field_validator("templates")
    @classmethod
    def one_slot_per_template(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("at least one template is required")
        for template in v:
            if template.count("{}") != 1:
                raise ValueError(f"template must contain exactly one '{{}}' slot: {template!r}")
        return v

    def fill(self, class_name: str) -> List[str]:
        return [t.replace("{}", class_name) for t in self.templates]


def make_stub_text_encoder(seed: int, dim: int) -> TextEncoder:
    """
    Seeded hash-embedding text encoder: sum of per-token Gaussian vectors.

    Token vectors derive from a BLAKE2 digest of (seed, token), so they are
    stable across processes.
    """
    def embed(text: str) -> np.ndarray:
        vector = np.zeros(dim)
        for token in tokenize(text):
            digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
            vector += np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
        return vector

    return embed


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def class_prototypes(prompts: PromptTemplateSet, text_encoder: TextEncoder) -> np.ndarray:
    """(num_classes, dim) unit prototypes from the normalized template-ensemble mean."""
    prototypes = []
    for name in prompts.class_names:
        embeddings = _l2_normalize(np.vstack([np.asarray(text_encoder(t), dtype=np.float64) for t in prompts.fill(name)]))
        prototypes.append(embeddings.mean(axis=0))
    return _l2_normalize(np.vstack(prototypes))


@dataclass
class ZeroShotResult:
    class_names: List[str]
    predictions: np.ndarray
    overall_accuracy: Optional[float] = None
    balanced_accuracy: Optional[float] = None
    per_class_accuracy: Dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "per_class_accuracy": self.per_class_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "predictions": [int(p) for p in self.predictions],
        }


def predict_with_prototypes(image_features, prototypes: np.ndarray) -> np.ndarray:
    """Argmax cosine similarity; ties resolve to the lowest class index."""
    images = np.asarray(_as_array(image_features), dtype=np.float64)
    if images.shape[1] != prototypes.shape[1]:
        raise DimensionMismatchError(f"image dim {images.shape[1]} != text dim {prototypes.shape[1]}")
    similarities = _l2_normalize(images) @ _l2_normalize(prototypes).T
    return np.argmax(similarities, axis=1)


def zero_shot_classify(
    image_features: Union[FeatureMatrix, np.ndarray],
    prompts: PromptTemplateSet,
    text_encoder: TextEncoder,
    labels: Optional[np.ndarray] = None,
) -> ZeroShotResult:
    """
    Classify images against prompt-ensemble class prototypes.

    Args:
        image_features: (N, dim) image embeddings
        prompts: Templates and class names
        text_encoder: Maps a prompt string to a dim-sized vector
        labels: Optional ground-truth class indices for accuracy

    Returns:
        ZeroShotResult with predictions and, when labels are given, plain,
        balanced and per-class accuracy

    Raises:
        EmptyInputError: If there are no class names
        DimensionMismatchError: If image and text dims differ
    """
    if not prompts.class_names:
        raise EmptyInputError("zero-shot classification needs at least one class name")
    predictions = predict_with_prototypes(image_features, class_prototypes(prompts, text_encoder))
    result = ZeroShotResult(class_names=list(prompts.class_names), predictions=predictions)
    if labels is not None:
        labels = np.asarray(labels)
        result.overall_accuracy = accuracy(labels, predictions)
        result.balanced_accuracy = balanced_accuracy(labels, predictions)
        result.per_class_accuracy = {
            prompts.class_names[c]: acc for c, acc in per_class_accuracy(labels, predictions).items()
        }
    return result


class ToyDualEncoder(nn.Module):
    """Linear image and text heads into a shared embedding space"""

    def __init__(self, image_dim: int, text_dim: int, embed_dim: int = 32):
        super().__init__()
        self.image_proj = nn.Linear(image_dim, embed_dim)
        self.text_proj = nn.Linear(text_dim, embed_dim)

    def forward(self, images: torch.Tensor, texts: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.image_proj(images), self.text_proj(texts)


def make_paired_dataset(
    n: int,
    latent_dim: int = 16,
    image_dim: int = 48,
    text_dim: int = 32,
    noise: float = 0.05,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Synthetic (image, text) feature pairs sharing a Gaussian latent."""
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, latent_dim))
    to_image = rng.standard_normal((latent_dim, image_dim))
    to_text = rng.standard_normal((latent_dim, text_dim))
    images = latent @ to_image + noise * rng.standard_normal((n, image_dim))
    texts = latent @ to_text + noise * rng.standard_normal((n, text_dim))
    return images.astype(np.float32), texts.astype(np.float32)


def train_toy_alignment(
    images: np.ndarray,
    texts: np.ndarray,
    epochs: int = 200,
    batch_size: int = 100,
    learning_rate: float = 1e-2,
    temperature: float = DEFAULT_TEMPERATURE,
    embed_dim: int = 32,
    seed: int = 0,
) -> ToyDualEncoder:
    """
    Train a ToyDualEncoder with the symmetric contrastive loss.

    Returns:
        The trained model (eval mode)

    Raises:
        InvalidBatchError: If there are fewer than 2 pairs, the pair counts differ
            or batch_size is below 2
    """
    if len(images) != len(texts):
        raise InvalidBatchError(f"{len(images)} images but {len(texts)} texts")
    if len(images) < 2 or batch_size < 2:
        raise InvalidBatchError("contrastive training needs at least 2 pairs per batch")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyDualEncoder(images.shape[1], texts.shape[1], embed_dim)
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=0.0)
    generator = torch.Generator().manual_seed(seed)
    image_t, text_t = torch.from_numpy(images).float(), torch.from_numpy(texts).float()

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(image_t), generator=generator)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            image_emb, text_emb = model(image_t[idx], text_t[idx])
            loss = info_nce(image_emb, text_emb, temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if epoch % 50 == 0:
            logger.debug("alignment epoch %d loss %.4f", epoch, float(loss))
    return model.eval()


def retrieval_top1(model: ToyDualEncoder, images: np.ndarray, texts: np.ndarray) -> float:
    """Fraction of images whose most similar text is their own pair."""
    with torch.no_grad():
        image_emb, text_emb = model(torch.from_numpy(images).float(), torch.from_numpy(texts).float())
        similarities = F.normalize(image_emb, dim=-1) @ F.normalize(text_emb, dim=-1).T
    return float((similarities.argmax(dim=1) == torch.arange(len(images))).float().mean())
