"""
Tests for the N-shot linear probing protocol.
"""
import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
test_dir = Path(__file__).parent.absolute()
project_root = test_dir.parent
sys.path.insert(0, str(project_root))

pytest.importorskip("torch")
from pydantic import ValidationError

from wsikit.errors import DimensionMismatchError, InsufficientSamplesError
from wsikit.probe import (
    PROBE_COLUMNS,
    ProbeProtocol,
    linear_probe,
    make_synthetic_probe_dataset,
    sample_shots,
    summarize_probe,
)


@pytest.fixture
def separable():
    """Two far-apart Gaussian blobs"""
    return make_synthetic_probe_dataset(per_class=40, dim=8, separation=12.0, seed=0)


class TestSampleShots:
    """Test per-class shot sampling"""

    def test_shots_per_class(self):
        """Test that exactly N samples per class are drawn without replacement"""
        labels = np.repeat([0, 1, 2], 10)
        idx = sample_shots(labels, 4, seed=3)
        assert len(set(idx.tolist())) == 12
        assert np.bincount(labels[idx]).tolist() == [4, 4, 4]

    def test_reproducible(self):
        """Test that the same (seed, shot) draws the same indices"""
        labels = np.repeat([0, 1], 50)
        assert np.array_equal(sample_shots(labels, 8, 1), sample_shots(labels, 8, 1))
        assert not np.array_equal(sample_shots(labels, 8, 1), sample_shots(labels, 8, 2))


class TestProtocol:
    """Test protocol validation"""

    def test_defaults(self):
        """Test the default shots and seeds"""
        protocol = ProbeProtocol()
        assert protocol.shots == [2, 8, 16, 32, 64, 128]
        assert protocol.seed_list == list(range(10))

    def test_unsorted_shots_rejected(self):
        """Test that shots must ascend"""
        with pytest.raises(ValidationError):
            ProbeProtocol(shots=[8, 2])


class TestLinearProbe:
    """Test the probing protocol end to end"""

    @pytest.mark.slow
    def test_default_record_count(self):
        """Test that 6 shots x 10 seeds give 60 records"""
        features, labels = make_synthetic_probe_dataset(seed=0)
        results = linear_probe(features, labels, dataset="synthetic", threads=4)
        assert len(results) == 60
        assert list(results.columns) == PROBE_COLUMNS
        assert results[["shot", "seed"]].drop_duplicates().shape[0] == 60
        summary = summarize_probe(results).set_index("shot")
        assert summary.loc[128, "mean"] >= summary.loc[2, "mean"]

    @pytest.mark.slow
    def test_more_shots_per_seed(self):
        """Test that 128 shots beat or match 2 shots on all but at most one seed"""
        features, labels = make_synthetic_probe_dataset(seed=1)
        results = linear_probe(features, labels, ProbeProtocol(shots=[2, 128], seeds=10), threads=4)
        by_seed = results.pivot(index="seed", columns="shot", values="accuracy")
        assert len(by_seed) == 10
        assert int((by_seed[128] < by_seed[2]).sum()) <= 1


    def test_separable_two_shot(self, separable):
        """Test that separable blobs reach >= 0.95 at N=2 across seeds"""
        features, labels = separable
        results = linear_probe(features, labels, ProbeProtocol(shots=[2], seeds=5))
        assert (results["accuracy"] >= 0.95).all()

    def test_constant_features_give_chance(self):
        """Test that identical features with balanced classes give 0.5"""
        features = np.ones((40, 4), dtype=np.float32)
        labels = np.repeat([0, 1], 20)
        results = linear_probe(features, labels, ProbeProtocol(shots=[2], seeds=3))
        assert np.allclose(results["accuracy"], 0.5)

    def test_reproducible_across_threads(self, separable):
        """Test that results do not depend on the thread count"""
        features, labels = separable
        protocol = ProbeProtocol(shots=[2, 8], seeds=3, epochs=5)
        a = linear_probe(features, labels, protocol, threads=1)
        b = linear_probe(features, labels, protocol, threads=4)
        c = linear_probe(features, labels, protocol, threads=1)
        assert a.equals(b)
        assert a.equals(c)

    def test_sorted_by_shot_then_seed(self, separable):
        """Test the record order"""
        features, labels = separable
        results = linear_probe(features, labels, ProbeProtocol(shots=[2, 4], seeds=2, epochs=2))
        assert list(zip(results["shot"], results["seed"])) == [(2, 0), (2, 1), (4, 0), (4, 1)]

    def test_string_labels(self, separable):
        """Test that arbitrary label values are accepted"""
        features, labels = separable
        named = np.where(labels == 0, "benign", "tumor")
        results = linear_probe(features, named, ProbeProtocol(shots=[2], seeds=1, epochs=2))
        assert len(results) == 1

    def test_official_test_split(self, separable):
        """Test evaluation on a provided test split"""
        features, labels = separable
        results = linear_probe(
            features, labels, ProbeProtocol(shots=[2], seeds=2),
            test_features=features[:10], test_labels=labels[:10],
        )
        assert (results["accuracy"] >= 0.9).all()

    def test_insufficient_samples(self):
        """Test that a class smaller than the largest shot is rejected"""
        features, labels = make_synthetic_probe_dataset(per_class=10, dim=4)
        with pytest.raises(InsufficientSamplesError):
            linear_probe(features, labels, ProbeProtocol(shots=[2, 16], seeds=1))

    def test_single_class(self):
        """Test that one class is rejected"""
        with pytest.raises(InsufficientSamplesError):
            linear_probe(np.zeros((10, 3)), np.zeros(10), ProbeProtocol(shots=[2], seeds=1))

    def test_nothing_held_out(self):
        """Test that using every sample for training is rejected"""
        features, labels = make_synthetic_probe_dataset(per_class=2, dim=4)
        with pytest.raises(InsufficientSamplesError):
            linear_probe(features, labels, ProbeProtocol(shots=[2], seeds=1))

    def test_label_count_mismatch(self):
        """Test that features and labels must have the same length"""
        with pytest.raises(DimensionMismatchError):
            linear_probe(np.zeros((10, 3)), np.zeros(9), ProbeProtocol(shots=[2], seeds=1))

    def test_permuted_labels_near_chance(self):
        """Test that shuffled labels stay near chance"""
        features, labels = make_synthetic_probe_dataset(per_class=100, dim=8, separation=3.0, seed=1)
        shuffled = np.random.default_rng(0).permutation(labels)
        results = linear_probe(features, shuffled, ProbeProtocol(shots=[8], seeds=5, epochs=5))
        assert 0.4 <= results["accuracy"].mean() <= 0.7
