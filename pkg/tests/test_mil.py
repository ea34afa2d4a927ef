"""
Tests for the gated-attention MIL head.
"""
import math
import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
test_dir = Path(__file__).parent.absolute()
project_root = test_dir.parent
sys.path.insert(0, str(project_root))

torch = pytest.importorskip("torch")
import pandas as pd

from wsikit.errors import DimensionMismatchError, EmptyInputError, InsufficientSamplesError
from wsikit.mil import (
    PREDICTION_COLUMNS,
    ABMILHead,
    make_synthetic_bags,
    mil_forward,
    mil_train,
    predict_bags,
    write_predictions,
)
from wsikit.utils.scoring import balanced_accuracy


@pytest.fixture
def head():
    torch.manual_seed(0)
    return ABMILHead(in_dim=6, num_classes=3, hidden_dim=8, attention_dim=4).double()


def loop_oracle(head, bag):
    """Per-instance gated attention recomputed with numpy"""
    p = {name: t.detach().numpy() for name, t in head.named_parameters()}
    h = [np.maximum(p["reduce.0.weight"] @ x + p["reduce.0.bias"], 0.0) for x in bag]
    scores = []
    for hi in h:
        v = np.tanh(p["attention_v.0.weight"] @ hi + p["attention_v.0.bias"])
        u = 1.0 / (1.0 + np.exp(-(p["attention_u.0.weight"] @ hi + p["attention_u.0.bias"])))
        scores.append(float(p["attention_score.weight"][0] @ (v * u) + p["attention_score.bias"][0]))
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    weights = np.array(exps) / sum(exps)
    pooled = sum(w * hi for w, hi in zip(weights, h))
    return p["classifier.weight"] @ pooled + p["classifier.bias"], weights, pooled


class TestMILForward:
    """Test gated attention pooling"""

    def test_identical_instances(self, head):
        """Test that identical instances pool to the reduced instance"""
        bag = np.tile(np.arange(6, dtype=np.float64), (5, 1))
        out = mil_forward(head, bag)
        with torch.no_grad():
            reduced = head.reduce(torch.from_numpy(bag[:1]))[0].numpy()
        assert np.allclose(out.pooled, reduced, atol=1e-12)
        assert np.allclose(out.attention, 0.2, atol=1e-12)

    def test_single_instance_weight_one(self, head):
        """Test that a single instance gets weight 1"""
        out = mil_forward(head, np.random.default_rng(0).standard_normal((1, 6)))
        assert out.attention.tolist() == [1.0]

    def test_weights_sum_to_one(self, head):
        """Test that attention weights form a distribution"""
        out = mil_forward(head, np.random.default_rng(1).standard_normal((40, 6)))
        assert abs(out.attention.sum() - 1.0) <= 1e-12
        assert np.all(out.attention >= 0)

    def test_default_dtype_weights_sum_to_one(self):
        """Test that a float32 head still pools with weights summing to 1 within 1e-12"""
        torch.manual_seed(5)
        head = ABMILHead(32)
        rng = np.random.default_rng(5)
        for _ in range(20):
            out = mil_forward(head, rng.standard_normal((257, 32)).astype(np.float32))
            assert out.attention.dtype == np.float64
            assert abs(out.attention.sum() - 1.0) <= 1e-12

    def test_permutation_equivariant(self, head):
        """Test that permuting instances permutes weights and keeps scores"""
        bag = np.random.default_rng(2).standard_normal((9, 6))
        perm = np.random.default_rng(3).permutation(9)
        a, b = mil_forward(head, bag), mil_forward(head, bag[perm])
        assert np.allclose(a.attention[perm], b.attention, atol=1e-12)
        assert np.allclose(a.scores, b.scores, atol=1e-12)

    def test_matches_loop_oracle(self, head):
        """Test against an instance-by-instance recomputation"""
        bag = np.random.default_rng(4).standard_normal((7, 6))
        scores, weights, pooled = loop_oracle(head, bag)
        out = mil_forward(head, bag)
        assert np.allclose(out.scores, scores, atol=1e-10)
        assert np.allclose(out.attention, weights, atol=1e-10)
        assert np.allclose(out.pooled, pooled, atol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, head, seed):
        """Test score gradients for instances and every weight against finite differences"""
        names = [name for name, _ in head.named_parameters()]
        weights = tuple(p.detach().clone().requires_grad_(True) for p in head.parameters())
        generator = torch.Generator().manual_seed(seed)
        x = torch.randn(4, 6, dtype=torch.float64, generator=generator, requires_grad=True)

        def scores(bag, *params):
            return torch.func.functional_call(head, dict(zip(names, params)), (bag,))[0]

        assert torch.autograd.gradcheck(scores, (x, *weights))

    def test_empty_bag(self, head):
        """Test that an empty bag is rejected"""
        with pytest.raises(EmptyInputError):
            mil_forward(head, np.zeros((0, 6)))

    def test_dim_mismatch(self, head):
        """Test that a wrong instance dim is rejected"""
        with pytest.raises(DimensionMismatchError):
            mil_forward(head, np.zeros((3, 5)))


class TestMILTraining:
    """Test MIL head training"""

    def test_single_class_rejected(self):
        """Test that a one-class training set is rejected"""
        bags, _ = make_synthetic_bags(count=4, dim=4)
        with pytest.raises(InsufficientSamplesError):
            mil_train(ABMILHead(4, hidden_dim=8, attention_dim=4), bags, np.zeros(4))

    def test_zero_learning_rate_keeps_weights(self):
        """Test that lr=0 leaves every weight unchanged"""
        torch.manual_seed(1)
        head = ABMILHead(4, hidden_dim=8, attention_dim=4)
        before = {k: v.clone() for k, v in head.state_dict().items()}
        bags, labels = make_synthetic_bags(count=6, dim=4)
        mil_train(head, bags, labels, epochs=2, lr=0.0)
        for key, value in head.state_dict().items():
            assert torch.equal(value, before[key])

    def test_history_and_best_epoch(self):
        """Test that history has one record per epoch and best epoch is within range"""
        torch.manual_seed(2)
        bags, labels = make_synthetic_bags(count=8, dim=4)
        result = mil_train(ABMILHead(4, hidden_dim=8, attention_dim=4), bags, labels, epochs=3, lr=1e-3)
        assert [r["epoch"] for r in result.history] == [0, 1, 2]
        assert 0 <= result.best_epoch < 3
        assert result.best_balanced_accuracy == max(r["val_balanced_accuracy"] for r in result.history)

    @pytest.mark.slow
    def test_separable_bags(self):
        """Test that mean-separable bags reach >= 0.95 validation balanced accuracy"""
        torch.manual_seed(0)
        bags, labels = make_synthetic_bags(count=80, dim=16, separation=6.0, seed=0)
        result = mil_train(
            ABMILHead(16), bags[:60], labels[:60], bags[60:], labels[60:], epochs=20, lr=1e-5, seed=0,
        )
        assert result.best_balanced_accuracy >= 0.95

    def test_shuffled_labels_at_chance(self):
        """Test that labels carrying no information give chance balanced accuracy on held-out bags"""
        torch.manual_seed(3)
        bags, labels = make_synthetic_bags(count=500, dim=8, seed=3)
        rng = np.random.default_rng(3)
        shuffled = rng.permutation(labels)
        result = mil_train(
            ABMILHead(8, hidden_dim=16, attention_dim=8), bags[:100], shuffled[:100], epochs=3, lr=1e-3, seed=3,
        )
        predictions, _ = predict_bags(result.head, bags[100:])
        assert 0.4 <= balanced_accuracy(shuffled[100:], predictions) <= 0.6

    def test_synthetic_bags_balanced(self):
        """Test that synthetic labels alternate"""
        bags, labels = make_synthetic_bags(count=10, dim=3, instances=(2, 5))
        assert labels.tolist() == [0, 1] * 5
        assert all(2 <= len(b) <= 5 and b.shape[1] == 3 for b in bags)


class TestPredictions:
    """Test prediction output"""

    def test_predictions_csv(self, tmp_path):
        """Test the predictions CSV layout"""
        torch.manual_seed(0)
        head = ABMILHead(4, hidden_dim=8, attention_dim=4)
        bags, _ = make_synthetic_bags(count=3, dim=4)
        predictions, confidences = predict_bags(head, bags)
        write_predictions(["a", "b", "c"], predictions, confidences, tmp_path / "out" / "pred.csv")
        frame = pd.read_csv(tmp_path / "out" / "pred.csv")
        assert list(frame.columns) == PREDICTION_COLUMNS
        assert frame["slide_id"].tolist() == ["a", "b", "c"]
        assert frame["confidence"].between(0.5, 1.0).all()
