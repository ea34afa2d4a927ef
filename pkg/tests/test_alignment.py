"""
Tests for contrastive alignment and zero-shot classification.
"""
import math
import pytest
import sys
from pathlib import Path
from unittest.mock import MagicMock

import numpy as np

# Add project root to path
test_dir = Path(__file__).parent.absolute()
project_root = test_dir.parent
sys.path.insert(0, str(project_root))

torch = pytest.importorskip("torch")
from pydantic import ValidationError

from wsikit.alignment import (
    AlignmentBatch,
    PromptTemplateSet,
    class_prototypes,
    contrastive_loss,
    make_paired_dataset,
    make_stub_text_encoder,
    predict_with_prototypes,
    retrieval_top1,
    train_toy_alignment,
    zero_shot_classify,
)
from wsikit.errors import DimensionMismatchError, EmptyInputError, InvalidBatchError


def loss_oracle(image, text, tau):
    """Symmetric InfoNCE by explicit enumeration"""
    def unit(v):
        return v / math.sqrt(sum(x * x for x in v))
    a = [unit(list(r)) for r in image]
    b = [unit(list(r)) for r in text]
    n = len(a)
    s = [[sum(x * y for x, y in zip(a[i], b[j])) / tau for j in range(n)] for i in range(n)]
    rows = sum(-s[i][i] + math.log(sum(math.exp(s[i][j]) for j in range(n))) for i in range(n)) / n
    cols = sum(-s[j][j] + math.log(sum(math.exp(s[i][j]) for i in range(n))) for j in range(n)) / n
    return 0.5 * (rows + cols)


class TestContrastiveLoss:
    """Test the symmetric InfoNCE loss and its gradients"""

    @pytest.mark.parametrize("batch", [2, 5, 16])
    def test_identical_embeddings_give_log_batch(self, batch):
        """Test that identical embeddings give loss ln B"""
        x = np.ones((batch, 4))
        result = contrastive_loss(AlignmentBatch(x, x.copy(), temperature=0.07))
        assert result.loss == pytest.approx(math.log(batch), abs=1e-12)

    def test_symmetric(self):
        """Test that swapping images and texts leaves the loss unchanged"""
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        forward = contrastive_loss(AlignmentBatch(a, b)).loss
        backward = contrastive_loss(AlignmentBatch(b, a)).loss
        assert forward == pytest.approx(backward, abs=1e-12)

    def test_matches_enumeration(self):
        """Test against an explicit double-loop recomputation"""
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        result = contrastive_loss(AlignmentBatch(a, b, temperature=0.1))
        assert result.loss == pytest.approx(loss_oracle(a, b, 0.1), abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        """Test both gradients against central differences"""
        rng = np.random.default_rng(2 + seed)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        result = contrastive_loss(AlignmentBatch(a, b, temperature=0.5))
        eps = 1e-6
        for which, grad in ((0, result.grad_image), (1, result.grad_text)):
            for i in range(3):
                for j in range(4):
                    pair_plus = [a.copy(), b.copy()]
                    pair_minus = [a.copy(), b.copy()]
                    pair_plus[which][i, j] += eps
                    pair_minus[which][i, j] -= eps
                    numeric = (loss_oracle(*pair_plus, 0.5) - loss_oracle(*pair_minus, 0.5)) / (2 * eps)
                    assert grad[i, j] == pytest.approx(numeric, abs=1e-6)

    def test_descent_step_lowers_loss(self):
        """Test that a small step against the gradient reduces the loss"""
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
        result = contrastive_loss(AlignmentBatch(a, b))
        stepped = contrastive_loss(AlignmentBatch(a - 1e-3 * result.grad_image, b - 1e-3 * result.grad_text))
        assert stepped.loss < result.loss

    def test_scale_invariant(self):
        """Test that rescaling embedding rows does not change the loss"""
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        scales = rng.uniform(0.5, 4.0, size=(5, 1))
        assert contrastive_loss(AlignmentBatch(a * scales, b)).loss == pytest.approx(
            contrastive_loss(AlignmentBatch(a, b)).loss, abs=1e-10
        )

    @pytest.mark.parametrize("temperature", [0.0, -0.1])
    def test_non_positive_temperature(self, temperature):
        """Test that tau <= 0 is an invalid batch"""
        with pytest.raises(InvalidBatchError):
            AlignmentBatch(np.ones((2, 3)), np.ones((2, 3)), temperature=temperature)

    def test_single_pair(self):
        """Test that one pair is an invalid batch"""
        with pytest.raises(InvalidBatchError):
            AlignmentBatch(np.ones((1, 3)), np.ones((1, 3)))

    def test_shape_mismatch(self):
        """Test that differing shapes are an invalid batch"""
        with pytest.raises(InvalidBatchError):
            AlignmentBatch(np.ones((3, 3)), np.ones((3, 4)))


class TestPromptTemplates:
    """Test prompt template validation"""

    def test_defaults(self):
        """Test that the default ensemble has three single-slot templates"""
        prompts = PromptTemplateSet(class_names=["tumor"])
        assert len(prompts.templates) == 3
        assert prompts.fill("tumor")[0] == "An H&E image of tumor"

    @pytest.mark.parametrize("template", ["no slot here", "{} and {}"])
    def test_slot_count_enforced(self, template):
        """Test that templates need exactly one slot"""
        with pytest.raises(ValidationError):
            PromptTemplateSet(templates=[template], class_names=["a"])


class TestZeroShot:
    """Test prompt-ensemble zero-shot classification"""

    def test_one_hot_prototypes(self):
        """Test that one-hot class embeddings give one-hot prototypes"""
        prompts = PromptTemplateSet(templates=["{}", "a {}"], class_names=["x", "y", "z"])
        basis = {"x": 0, "y": 1, "z": 2}
        encoder = MagicMock(side_effect=lambda text: np.eye(3)[basis[text.split()[-1]]] * 5.0)
        prototypes = class_prototypes(prompts, encoder)
        assert np.allclose(prototypes, np.eye(3))
        assert encoder.call_count == 6

    def test_image_rescale_invariant(self):
        """Test that rescaling image rows does not change predictions"""
        prompts = PromptTemplateSet(class_names=["alpha", "beta", "gamma"])
        encoder = make_stub_text_encoder(seed=0, dim=8)
        images = np.random.default_rng(5).standard_normal((20, 8))
        a = zero_shot_classify(images, prompts, encoder).predictions
        b = zero_shot_classify(images * 7.5, prompts, encoder).predictions
        assert np.array_equal(a, b)

    def test_ties_go_to_lowest_index(self):
        """Test that equal similarities resolve to the first class"""
        prototypes = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert predict_with_prototypes(np.array([[2.0, 0.0]]), prototypes).tolist() == [0]

    def test_empty_class_names(self):
        """Test that no class names is an empty-input error"""
        with pytest.raises(EmptyInputError):
            zero_shot_classify(np.ones((2, 4)), PromptTemplateSet(class_names=[]), make_stub_text_encoder(0, 4))

    def test_dim_mismatch(self):
        """Test that image and text dims must agree"""
        with pytest.raises(DimensionMismatchError):
            zero_shot_classify(np.ones((2, 4)), PromptTemplateSet(class_names=["a"]), make_stub_text_encoder(0, 5))

    def test_matches_similarity_table(self):
        """Test 3 classes x 30 images against a hand-rolled cosine argmax"""
        prompts = PromptTemplateSet(class_names=["adipose", "stroma", "tumor"])
        encoder = make_stub_text_encoder(seed=3, dim=12)
        rng = np.random.default_rng(6)
        images = rng.standard_normal((30, 12))
        labels = rng.integers(0, 3, size=30)
        result = zero_shot_classify(images, prompts, encoder, labels=labels)

        protos = []
        for name in prompts.class_names:
            vecs = [encoder(t) / np.linalg.norm(encoder(t)) for t in prompts.fill(name)]
            mean = sum(vecs) / len(vecs)
            protos.append(mean / np.linalg.norm(mean))
        expected = []
        for image in images:
            unit = image / np.linalg.norm(image)
            sims = [float(unit @ p) for p in protos]
            expected.append(sims.index(max(sims)))

        assert result.predictions.tolist() == expected
        assert result.overall_accuracy == pytest.approx(np.mean(np.array(expected) == labels))
        assert set(result.per_class_accuracy) <= set(prompts.class_names)

    def test_stub_text_encoder_deterministic(self):
        """Test that the hash text encoder is stable for a seed"""
        a = make_stub_text_encoder(4, 6)("An H&E image of tumor")
        b = make_stub_text_encoder(4, 6)("An H&E image of tumor")
        assert np.array_equal(a, b)
        assert not np.array_equal(a, make_stub_text_encoder(5, 6)("An H&E image of tumor"))

    def test_result_json(self):
        """Test the JSON view of a zero-shot result"""
        prompts = PromptTemplateSet(class_names=["a", "b"])
        result = zero_shot_classify(np.eye(2), prompts, make_stub_text_encoder(0, 2), labels=np.array([0, 1]))
        payload = result.to_json_dict()
        assert payload["class_names"] == ["a", "b"]
        assert len(payload["predictions"]) == 2
        assert 0.0 <= payload["balanced_accuracy"] <= 1.0


class TestToyAlignment:
    """Test desk-scale contrastive training"""

    @pytest.mark.slow
    def test_held_out_retrieval(self):
        """Test that 500 paired samples reach >= 95% held-out top-1 retrieval"""
        images, texts = make_paired_dataset(500, seed=0)
        model = train_toy_alignment(images[:400], texts[:400], epochs=200, seed=0)
        assert retrieval_top1(model, images[400:], texts[400:]) >= 0.95

    def test_training_is_reproducible(self):
        """Test that the same seed trains identical weights"""
        images, texts = make_paired_dataset(40, seed=1)
        a = train_toy_alignment(images, texts, epochs=3, batch_size=20, seed=2)
        b = train_toy_alignment(images, texts, epochs=3, batch_size=20, seed=2)
        assert torch.equal(a.image_proj.weight, b.image_proj.weight)

    def test_single_pair_rejected(self):
        """Test that training needs at least two pairs and batches of two"""
        images, texts = make_paired_dataset(4, seed=3)
        with pytest.raises(InvalidBatchError):
            train_toy_alignment(images[:1], texts[:1], epochs=1)
        with pytest.raises(InvalidBatchError):
            train_toy_alignment(images, texts, epochs=1, batch_size=1)
        with pytest.raises(InvalidBatchError):
            train_toy_alignment(images, texts[:3], epochs=1)
