import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simmil.errors import ContractError
from simmil.models import (
    ABMIL,
    DSMIL,
    Extractor,
    PredictionHead,
    agg_abmil,
    agg_dsmil,
    agg_max,
    agg_mean,
    build_aggregator,
)
from simmil.numeric import Tensor, check_gradients


def feats(n, d=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)


class TestExtractor:
    def test_output_dim_any_size(self):
        ext = Extractor((4, 8), rng=np.random.default_rng(0))
        for size in (8, 13, 32):
            assert ext(np.zeros((2, size, size, 3), dtype=np.float32)).shape == (2, 8)

    def test_zero_input_zero_init(self):
        ext = Extractor((4, 6), rng=np.random.default_rng(0)).zero_init()
        ext.eval()
        out = ext(np.zeros((3, 8, 8, 3), dtype=np.float32)).data
        np.testing.assert_array_equal(out, out[:1].repeat(3, axis=0))
        assert np.all(out == out.flat[0])

    def test_identical_patches(self):
        ext = Extractor((4, 8), rng=np.random.default_rng(1))
        ext.eval()
        x = np.random.default_rng(2).random((1, 16, 16, 3)).astype(np.float32)
        out = ext(np.concatenate([x, x])).data
        assert out[0].tobytes() == out[1].tobytes()

    def test_channel_mismatch(self):
        ext = Extractor((4,), in_channels=3, rng=np.random.default_rng(0))
        with pytest.raises(ContractError):
            ext(np.zeros((1, 8, 8, 1), dtype=np.float32))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        ext = Extractor((3, 4), rng=rng).astype(np.float64)
        x = rng.random((3, 8, 8, 3))
        w = Tensor(rng.normal(size=(3, 4)))
        assert check_gradients(lambda: (ext(x) * w).sum(), ext.parameters()) < 1e-3


class TestHead:
    def test_shape_and_gradients(self):
        rng = np.random.default_rng(4)
        head = PredictionHead(6, 3, hidden=5, rng=rng).astype(np.float64)
        x = Tensor(rng.normal(size=(4, 6)))
        assert head(x).shape == (4, 3)
        y = Tensor(rng.normal(size=(4, 3)))
        assert check_gradients(lambda: (head(x) * y).sum(), head.parameters()) < 1e-3


class TestPooling:
    def test_worked_example(self):
        f = np.array([[1.0, 2.0], [3.0, 0.0]])
        assert agg_max(f).tolist() == [3.0, 2.0]
        assert agg_mean(f).tolist() == [2.0, 1.0]

    def test_single_instance_identity(self):
        f = feats(1)
        assert agg_max(f).tobytes() == f[0].tobytes()
        assert agg_mean(f).tobytes() == f[0].tobytes()

    def test_empty(self):
        with pytest.raises(ContractError):
            agg_max(np.zeros((0, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 10_000))
    def test_permutation_bit_identical(self, n, seed):
        f = feats(n, seed=seed) * 1e3
        perm = np.random.default_rng(seed).permutation(n)
        assert agg_max(f[perm]).tobytes() == agg_max(f).tobytes()
        assert agg_mean(f[perm]).tobytes() == agg_mean(f).tobytes()

    def test_batched_mean_matches_masked(self):
        probe = build_aggregator("mean", 8, 2, np.random.default_rng(0))
        f = feats(5)
        padded = np.zeros((1, 7, 8), dtype=np.float32)
        padded[0, :5] = f
        mask = np.array([[True] * 5 + [False] * 2])
        assert probe.pool(Tensor(padded), mask).data[0].tobytes() == agg_mean(f).tobytes()


class TestABMIL:
    def make(self, d=8):
        return ABMIL(d, 2, np.random.default_rng(0))

    def test_identical_instances_uniform(self):
        _, w = agg_abmil(np.tile(feats(1), (5, 1)), self.make())
        np.testing.assert_allclose(w, 0.2, atol=1e-7)

    def test_single_instance(self):
        _, w = agg_abmil(feats(1), self.make())
        assert w.tolist() == [1.0]

    def test_weights_sum_and_permutation(self):
        m = self.make()
        for seed in range(20):
            f = feats(17, seed=seed)
            emb, w = agg_abmil(f, m)
            assert abs(w.sum() - 1) < 1e-6 and (w >= 0).all()
            perm = np.random.default_rng(seed).permutation(17)
            emb2, w2 = agg_abmil(f[perm], m)
            np.testing.assert_allclose(emb2, emb, atol=1e-6)
            np.testing.assert_allclose(w2, w[perm], atol=1e-7)

    def test_mask_ignores_padding(self):
        m = self.make()
        f = feats(4)
        padded = np.concatenate([f, np.full((3, 8), 50.0, dtype=np.float32)])[None]
        logits, w = m(Tensor(padded), np.array([[True] * 4 + [False] * 3]))
        ref, _ = m(Tensor(f[None]))
        np.testing.assert_allclose(logits.data, ref.data, atol=1e-6)
        assert np.all(w.data[0, 4:] == 0)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        m = ABMIL(5, 3, rng).astype(np.float64)
        x = Tensor(rng.normal(size=(2, 4, 5)))
        y = Tensor(rng.normal(size=(2, 3)))
        assert check_gradients(lambda: (m(x)[0] * y).sum(), m.parameters()) < 1e-3


class TestDSMIL:
    def make(self, d=8, out=2):
        return DSMIL(d, out, np.random.default_rng(5))

    def test_single_instance(self):
        scores, crit, w = agg_dsmil(feats(1), self.make())
        assert crit.tolist() == [0, 0]
        np.testing.assert_allclose(w, 1.0)
        assert scores.shape == (2,)

    def test_permutation(self):
        m = self.make()
        for seed in range(20):
            f = feats(11, seed=seed)
            s, crit, w = agg_dsmil(f, m)
            perm = np.random.default_rng(seed).permutation(11)
            s2, crit2, w2 = agg_dsmil(f[perm], m)
            np.testing.assert_allclose(s2, s, atol=1e-6)
            assert perm[crit2].tolist() == crit.tolist()
            np.testing.assert_allclose(w2, w[perm], atol=1e-7)
            np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)

    def test_ties_pick_lowest_index(self):
        f = np.tile(feats(1), (4, 1))
        _, crit, _ = agg_dsmil(f, self.make())
        assert crit.tolist() == [0, 0]

    def test_critical_weight_is_maximal_for_equal_norm_queries(self):
        rng = np.random.default_rng(6)
        d = 6
        m = DSMIL(d, 1, rng, qdim=d)
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        m.q.weight.data[...] = q.astype(np.float32)
        m.q.bias.data[...] = 0
        raw = rng.normal(size=(5, d))
        f = (raw / np.linalg.norm(raw, axis=1, keepdims=True)).astype(np.float32)
        _, crit, w = agg_dsmil(f, m)
        assert w[crit[0], 0] >= w[:, 0].max() - 1e-7

    def test_gradients(self):
        rng = np.random.default_rng(7)
        m = DSMIL(5, 2, rng).astype(np.float64)
        x = Tensor(rng.normal(size=(2, 6, 5)))
        y = Tensor(rng.normal(size=(2, 2)))
        assert check_gradients(lambda: (m(x)[0] * y).sum(), m.parameters()) < 1e-3


def test_unknown_aggregator():
    with pytest.raises(ContractError):
        build_aggregator("transmil", 4, 2, np.random.default_rng(0))
