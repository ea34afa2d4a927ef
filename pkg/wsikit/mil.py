"""
Gated-attention MIL head for slide-level classification from region features.
"""
import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from wsikit.errors import DimensionMismatchError, EmptyInputError, InsufficientSamplesError
from wsikit.features import FeatureMatrix
from wsikit.utils.scoring import accuracy, balanced_accuracy

logger = logging.getLogger(__name__)

REDUCED_DIM = 256
DEFAULT_ATTENTION_DIM = 128

PREDICTION_COLUMNS = ["slide_id", "predicted_class", "confidence"]

Bag = Union[FeatureMatrix, np.ndarray, torch.Tensor]


class ABMILHead(nn.Module):
    """Reduce -> gated attention pooling -> classify"""

    def __init__(self,
                 in_dim: int,
                 num_classes: int = 2,
                 hidden_dim: int = REDUCED_DIM,
                 attention_dim: int = DEFAULT_ATTENTION_DIM):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.reduce = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU())
        self.attention_v = nn.Sequential(nn.Linear(hidden_dim, attention_dim), nn.Tanh())
        self.attention_u = nn.Sequential(nn.Linear(hidden_dim, attention_dim), nn.Sigmoid())
        self.attention_score = nn.Linear(attention_dim, 1)
        self.classifier = nn.Linear(hidden_dim, num_classes)

    def forward(self, bag: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Args:
            bag: (N, in_dim) instance features

        Returns:
            (class scores (num_classes,), attention weights (N,) in float64,
            pooled feature (hidden_dim,))
        """
        h = self.reduce(bag)
        scores = self.attention_score(self.attention_v(h) * self.attention_u(h)).squeeze(-1)
        # pooling runs in float64 whatever the head's dtype
        weights = torch.softmax(scores.double(), dim=0)
        pooled = (weights @ h.double()).to(h.dtype)
        return self.classifier(pooled), weights, pooled


# The module is the head's state
MILHead = ABMILHead


def _bag_tensor(bag: Bag, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(bag, FeatureMatrix):
        bag = bag.data
    if isinstance(bag, np.ndarray):
        bag = torch.from_numpy(bag)
    return bag.to(dtype)


@dataclass
class MILOutput:
    scores: np.ndarray
    attention: np.ndarray
    pooled: np.ndarray


def mil_forward(head: ABMILHead, bag: Bag) -> MILOutput:
    """
    Score one bag.

    Raises:
        EmptyInputError: If the bag has no instances
        DimensionMismatchError: If the instance dim differs from the head's in_dim
    """
    x = _bag_tensor(bag, next(head.parameters()).dtype)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("MIL bag must contain at least one instance")
    if x.shape[1] != head.in_dim:
        raise DimensionMismatchError(f"instance dim {x.shape[1]} != head in_dim {head.in_dim}")
    with torch.no_grad():
        scores, weights, pooled = head(x)
    return MILOutput(scores=scores.numpy(), attention=weights.numpy(), pooled=pooled.numpy())


def predict_bags(head: ABMILHead, bags: Sequence[Bag]) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted class and softmax confidence per bag."""
    head.eval()
    predictions, confidences = [], []
    for bag in bags:
        probabilities = torch.softmax(torch.from_numpy(mil_forward(head, bag).scores), dim=0)
        predictions.append(int(probabilities.argmax()))
        confidences.append(float(probabilities.max()))
    return np.array(predictions, dtype=np.int64), np.array(confidences)


@dataclass
class MILTrainResult:
    head: ABMILHead
    best_epoch: int
    best_balanced_accuracy: float
    history: List[dict] = field(default_factory=list)


def mil_train(
    head: ABMILHead,
    train_bags: Sequence[Bag],
    train_labels,
    val_bags: Optional[Sequence[Bag]] = None,
    val_labels=None,
    epochs: int = 20,
    lr: float = 1e-5,
    seed: int = 0,
) -> MILTrainResult:
    """
    Train with Adam (no weight decay) at a fixed rate, one bag per step.

    Args:
        head: Head to train in place
        train_bags: Training bags of instance features
        train_labels: Class index per training bag
        val_bags: Validation bags (default: the training bags)
        val_labels: Validation labels
        epochs: Passes over the training set
        lr: Fixed learning rate
        seed: Shuffle seed

    Returns:
        MILTrainResult whose head holds the checkpoint with the best
        validation balanced accuracy (earliest epoch on ties)

    Raises:
        InsufficientSamplesError: If fewer than 2 classes are present
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_bags) != len(train_labels):
        raise DimensionMismatchError(f"{len(train_bags)} bags but {len(train_labels)} labels")
    if len(np.unique(train_labels)) < 2:
        raise InsufficientSamplesError("MIL training needs at least 2 classes")
    if val_bags is None:
        val_bags, val_labels = train_bags, train_labels
    val_labels = np.asarray(val_labels, dtype=np.int64)

    dtype = next(head.parameters()).dtype
    optimizer = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=0.0)
    generator = torch.Generator().manual_seed(seed)
    targets = torch.from_numpy(train_labels)

    best_score, best_epoch = -1.0, -1
    best_state = copy.deepcopy(head.state_dict())
    history = []
    for epoch in range(epochs):
        head.train()
        epoch_loss = 0.0
        for index in torch.randperm(len(train_bags), generator=generator).tolist():
            scores, _, _ = head(_bag_tensor(train_bags[index], dtype))
            loss = F.cross_entropy(scores.unsqueeze(0), targets[index].view(1))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss)

        predictions, _ = predict_bags(head, val_bags)
        score = balanced_accuracy(val_labels, predictions)
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / len(train_bags),
            "val_accuracy": accuracy(val_labels, predictions),
            "val_balanced_accuracy": score,
        })
        logger.debug("mil epoch %d loss %.4f val bacc %.4f", epoch, history[-1]["train_loss"], score)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = copy.deepcopy(head.state_dict())

    head.load_state_dict(best_state)
    return MILTrainResult(head=head, best_epoch=best_epoch, best_balanced_accuracy=best_score, history=history)


def write_predictions(slide_ids: Sequence[str], predictions, confidences, path: Union[str, Path]) -> pd.DataFrame:
    """Write MIL predictions as CSV {slide_id, predicted_class, confidence}."""
    frame = pd.DataFrame({
        "slide_id": list(slide_ids),
        "predicted_class": np.asarray(predictions, dtype=np.int64),
        "confidence": np.asarray(confidences, dtype=np.float64),
    }, columns=PREDICTION_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return frame


def make_synthetic_bags(
    count: int = 40,
    dim: int = 32,
    instances: Tuple[int, int] = (4, 16),
    separation: float = 6.0,
    seed: int = 0,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Two-class bags whose instance mean is shifted by +-separation/2 along a
    random unit direction; labels alternate so classes are balanced.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    labels = np.arange(count) % 2
    bags = [
        (rng.standard_normal((int(rng.integers(instances[0], instances[1] + 1)), dim))
         + (label - 0.5) * separation * direction).astype(np.float32)
        for label in labels
    ]
    return bags, labels
