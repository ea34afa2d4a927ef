"""
Tests for patch encoders, region aggregation, the projector and feature files.
"""
import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
test_dir = Path(__file__).parent.absolute()
project_root = test_dir.parent
sys.path.insert(0, str(project_root))

torch = pytest.importorskip("torch")

from wsikit.encoders import (
    EncoderSpec,
    Projector,
    aggregate_region,
    encode_tiles,
    make_stub_encoder,
    make_zero_encoder,
    project,
)
from wsikit.errors import CorruptFileError, DimensionMismatchError, EncoderError, ManifestMismatchError, NumericError
from wsikit.features import FeatureMatrix, Provenance, read_feature_matrix, write_feature_matrix


@pytest.fixture
def tiles():
    """Five random RGB tiles of mixed sizes"""
    rng = np.random.default_rng(0)
    return [rng.integers(0, 256, size=(s, s, 3), dtype=np.uint8) for s in (64, 64, 128, 32, 224)]


class TestEncodeTiles:
    """Test dual-tower tile encoding"""

    def test_concatenated_dim(self, tiles):
        """Test that dims 4 and 3 concatenate to 7"""
        features = encode_tiles(tiles, make_stub_encoder(1, 4), make_stub_encoder(2, 3))
        assert (features.rows, features.dim) == (5, 7)
        assert features.provenance == Provenance.TILE

    def test_zero_second_tower(self, tiles):
        """Test that a zero-encoder second tower pads the first tower's output with zeros"""
        enc_a = make_stub_encoder(1, 6)
        features = encode_tiles(tiles[:1], enc_a, make_zero_encoder(3))
        expected = enc_a(tiles[0]).astype(np.float32)
        assert np.array_equal(features.data[0, :6], expected)
        assert np.all(features.data[0, 6:] == 0)

    def test_matches_one_at_a_time(self, tiles):
        """Test that batch output equals per-tile recomputation, tower A first"""
        enc_a, enc_b = make_stub_encoder(5, 8), make_stub_encoder(6, 4)
        features = encode_tiles(tiles, enc_a, enc_b, threads=3)
        for i, tile in enumerate(tiles):
            row = np.concatenate([enc_a(tile), enc_b(tile)]).astype(np.float32)
            assert np.array_equal(features.data[i], row)

    def test_single_tower(self, tiles):
        """Test that omitting tower B encodes with tower A only"""
        enc_a = make_stub_encoder(5, 8)
        assert encode_tiles(tiles, enc_a).dim == 8

    def test_failure_carries_tile_index(self, tiles):
        """Test that an encoder failure aborts with the tile index"""
        def embed(tile):
            if tile.mean() < 0:
                return np.zeros(2)
            raise RuntimeError("boom")
        broken = EncoderSpec(name="broken", input_size_px=16, output_dim=2, embed=embed)
        with pytest.raises(EncoderError) as info:
            encode_tiles(tiles[2:], broken)
        assert info.value.tile_index == 0

    def test_wrong_output_shape(self, tiles):
        """Test that an encoder returning the wrong width fails"""
        bad = EncoderSpec(name="bad", input_size_px=16, output_dim=3, embed=lambda t: np.zeros(4))
        with pytest.raises(EncoderError):
            encode_tiles(tiles[:1], bad)


class TestStubEncoder:
    """Test the deterministic stub encoder"""

    def test_deterministic(self, tiles):
        """Test that identical buffers and seeds give identical vectors"""
        assert np.array_equal(make_stub_encoder(3, 16)(tiles[0]), make_stub_encoder(3, 16)(tiles[0].copy()))

    def test_pixel_change_changes_vector(self, tiles):
        """Test that a one-pixel change alters the embedding"""
        encoder = make_stub_encoder(3, 16, input_size_px=64)
        changed = tiles[0].copy()
        changed[0, 0] = 255 - changed[0, 0]
        assert not np.array_equal(encoder(tiles[0]), encoder(changed))

    def test_seed_changes_projection(self, tiles):
        """Test that a different seed yields a different embedding"""
        assert not np.array_equal(make_stub_encoder(1, 16)(tiles[0]), make_stub_encoder(2, 16)(tiles[0]))


class TestAggregateRegion:
    """Test average pooling over the 21 tiles of a region"""

    def test_identical_rows(self):
        """Test that 21 identical rows pool to that row"""
        v = np.arange(5, dtype=np.float32)
        pooled = aggregate_region(FeatureMatrix.from_array(np.tile(v, (21, 1)), Provenance.TILE))
        assert np.allclose(pooled, v)

    def test_standard_basis(self):
        """Test that e1..e21 pool to (1/21) * ones"""
        pooled = aggregate_region(FeatureMatrix.from_array(np.eye(21), Provenance.TILE))
        assert np.allclose(pooled, np.full(21, 1 / 21), atol=1e-12)

    def test_matches_summation_oracle(self):
        """Test against an independent sum / 21"""
        data = np.random.default_rng(1).standard_normal((21, 8)).astype(np.float32)
        pooled = aggregate_region(FeatureMatrix.from_array(data, Provenance.TILE))
        oracle = [sum(float(data[i, j]) for i in range(21)) / 21 for j in range(8)]
        assert np.allclose(pooled, oracle, rtol=1e-12, atol=1e-12)

    def test_permutation_invariant(self):
        """Test that row order does not change the pooled vector"""
        data = np.random.default_rng(2).standard_normal((21, 6))
        perm = np.random.default_rng(3).permutation(21)
        a = aggregate_region(FeatureMatrix.from_array(data, Provenance.TILE))
        b = aggregate_region(FeatureMatrix.from_array(data[perm], Provenance.TILE))
        assert np.allclose(a, b, atol=1e-7)

    def test_linearity(self):
        """Test that pooling is linear in its input"""
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((21, 4)), rng.standard_normal((21, 4))
        combined = aggregate_region(FeatureMatrix.from_array(2.0 * x - 0.5 * y, Provenance.TILE))
        separate = (2.0 * aggregate_region(FeatureMatrix.from_array(x, Provenance.TILE))
                    - 0.5 * aggregate_region(FeatureMatrix.from_array(y, Provenance.TILE)))
        assert np.allclose(combined, separate, atol=1e-5)

    def test_scale_balanced_mode(self):
        """Test that scale_balanced averages the three per-scale means"""
        data = np.zeros((21, 1))
        data[0] = 3.0
        data[1:5] = 6.0
        data[5:] = 9.0
        pooled = aggregate_region(FeatureMatrix.from_array(data, Provenance.TILE), mode="scale_balanced")
        assert np.isclose(pooled[0], 6.0)

    def test_wrong_row_count(self):
        """Test that anything but 21 rows is a manifest mismatch"""
        with pytest.raises(ManifestMismatchError):
            aggregate_region(FeatureMatrix.from_array(np.zeros((20, 3)), Provenance.TILE))


class TestProjector:
    """Test the two-layer MLP projector"""

    def test_identity_layers(self):
        """Test that identity weights with identity activation return the input"""
        projector = Projector(4, 4, 4, activation="identity")
        with torch.no_grad():
            for layer in (projector.fc1, projector.fc2):
                layer.weight.copy_(torch.eye(4))
                layer.bias.zero_()
        x = FeatureMatrix.from_array(np.random.default_rng(0).standard_normal((3, 4)), Provenance.REGION)
        assert np.allclose(project(x, projector).data, x.data, atol=1e-6)

    def test_zero_second_layer(self):
        """Test that a zero second layer leaves only its bias"""
        projector = Projector(4, 8, 3)
        with torch.no_grad():
            projector.fc2.weight.zero_()
        x = FeatureMatrix.from_array(np.ones((2, 4)), Provenance.REGION)
        out = project(x, projector).data
        assert np.allclose(out, np.tile(projector.fc2.bias.detach().numpy(), (2, 1)))

    def test_matches_scalar_loop(self):
        """Test against a straight-line per-row recomputation with GELU"""
        torch.manual_seed(0)
        projector = Projector(3, 5, 2)
        x = np.random.default_rng(5).standard_normal((4, 3)).astype(np.float32)
        out = project(FeatureMatrix.from_array(x, Provenance.REGION), projector).data
        w1, b1 = projector.fc1.weight.detach().double().numpy(), projector.fc1.bias.detach().double().numpy()
        w2, b2 = projector.fc2.weight.detach().double().numpy(), projector.fc2.bias.detach().double().numpy()
        from math import erf, sqrt
        for r in range(4):
            hidden = []
            for j in range(5):
                z = b1[j] + sum(w1[j, k] * float(x[r, k]) for k in range(3))
                hidden.append(0.5 * z * (1 + erf(z / sqrt(2))))
            for i in range(2):
                expected = b2[i] + sum(w2[i, j] * hidden[j] for j in range(5))
                assert abs(out[r, i] - expected) < 1e-5

    def test_identity_activation_is_affine(self):
        """Test that identity activation composes to one affine map"""
        projector = Projector(3, 6, 2, activation="identity")
        w1, b1 = projector.fc1.weight.detach().double().numpy(), projector.fc1.bias.detach().double().numpy()
        w2, b2 = projector.fc2.weight.detach().double().numpy(), projector.fc2.bias.detach().double().numpy()
        x = np.random.default_rng(6).standard_normal((5, 3))
        out = project(FeatureMatrix.from_array(x, Provenance.REGION), projector).data
        assert np.allclose(out, x @ (w2 @ w1).T + (w2 @ b1 + b2), atol=1e-5)

    def test_dim_mismatch(self):
        """Test that a wrong feature dim is rejected"""
        with pytest.raises(DimensionMismatchError):
            project(FeatureMatrix.from_array(np.ones((2, 5)), Provenance.REGION), Projector(4, 4, 4))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        """Test projector gradients for inputs and every weight against finite differences"""
        torch.manual_seed(seed)
        projector = Projector(3, 4, 2).double()
        names = [name for name, _ in projector.named_parameters()]
        weights = tuple(p.detach().clone().requires_grad_(True) for p in projector.parameters())
        x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)

        def forward(inputs, *params):
            return torch.func.functional_call(projector, dict(zip(names, params)), (inputs,))

        assert torch.autograd.gradcheck(forward, (x, *weights), eps=1e-6, atol=1e-6, rtol=1e-4)


class TestFeatureFile:
    """Test the binary feature matrix format"""

    def test_round_trip(self, tmp_path):
        """Test that a written matrix reads back equal"""
        matrix = FeatureMatrix.from_array(np.random.default_rng(0).standard_normal((4, 7)), Provenance.REGION)
        write_feature_matrix(matrix, tmp_path / "f.wsfm")
        assert read_feature_matrix(tmp_path / "f.wsfm").equals(matrix)

    def test_header_layout(self, tmp_path):
        """Test the 16-byte header and float32 payload size"""
        matrix = FeatureMatrix.from_array(np.ones((3, 5)), Provenance.COMPRESSED)
        write_feature_matrix(matrix, tmp_path / "f.wsfm")
        payload = (tmp_path / "f.wsfm").read_bytes()
        assert payload[:4] == b"WSFM"
        assert int.from_bytes(payload[4:8], "little") == 3
        assert int.from_bytes(payload[8:12], "little") == 5
        assert int.from_bytes(payload[12:16], "little") == int(Provenance.COMPRESSED)
        assert len(payload) == 16 + 3 * 5 * 4

    def test_bad_magic(self, tmp_path):
        """Test that a wrong magic number is rejected"""
        path = tmp_path / "f.wsfm"
        write_feature_matrix(FeatureMatrix.from_array(np.ones((1, 2)), Provenance.TEXT), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CorruptFileError):
            read_feature_matrix(path)

    def test_truncated_payload(self, tmp_path):
        """Test that a short payload is rejected"""
        path = tmp_path / "f.wsfm"
        write_feature_matrix(FeatureMatrix.from_array(np.ones((2, 2)), Provenance.TILE), path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CorruptFileError):
            read_feature_matrix(path)

    def test_non_finite_rejected(self):
        """Test that NaN entries raise a numeric error"""
        with pytest.raises(NumericError):
            FeatureMatrix.from_array(np.array([[1.0, np.nan]]), Provenance.REGION)
