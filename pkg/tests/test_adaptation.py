import json
from pathlib import Path

import numpy as np
import pytest

from featrehearse.adaptation import AdapterTrainConfig, FeaturePairSet, adapt_memory, build_pairs, train_adapter
from featrehearse.data import ConfigurationError
from featrehearse.losses import loss_ce, loss_fd
from featrehearse.memory import FeatureMemory, store_task_features
from featrehearse.nn import AdapterNetwork, CosineHead, DimensionError, Extractor, param_digest

FIXTURE = Path(__file__).parent / "fixtures" / "adapter_pilot.json"
PILOT = (("identity", 40, 1e-3), ("random", 300, 3e-3))
ARCH = ("conv:3:3", "relu", "pool", "flatten", "dense:8")


def _images(n=60, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 1, 8, 8)).astype(np.float32)


def _self_pairs(seed=0, n=200):
    ext = Extractor(ARCH, (1, 8, 8), seed=seed)
    x = _images(n, seed)
    return ext, build_pairs(ext, ext, x, np.arange(n) % 3)


def _identity_adapter(d):
    ad = AdapterNetwork(d, hidden=d, dtype=np.float64)
    for layer in ad.layers:
        if "w" in layer.params:
            layer.params["w"][...] = np.eye(d)
            layer.params["b"][...] = 0
    return ad


class TestPairs:
    def test_same_extractor(self):
        _, pairs = _self_pairs()
        np.testing.assert_array_equal(pairs.v_old, pairs.v_new)
        assert len(pairs) == 200
        np.testing.assert_allclose(np.linalg.norm(pairs.v_old, axis=1), 1, atol=1e-5)

    def test_empty(self):
        ext = Extractor(ARCH, (1, 8, 8))
        assert len(build_pairs(ext, ext, np.zeros((0, 1, 8, 8), np.float32))) == 0

    def test_dim_mismatch(self):
        a = Extractor(ARCH, (1, 8, 8))
        b = Extractor(ARCH[:-1] + ("dense:5",), (1, 8, 8))
        with pytest.raises(DimensionError):
            build_pairs(a, b, _images(3))


class TestTrain:
    def _head(self, d=8):
        return CosineHead(d, 3, seed=4, dtype=np.float32)

    def test_self_adaptation_pilot(self):
        # near-identity map is reachable when old == new; value pinned by a pilot run
        _, pairs = _self_pairs()
        for init, epochs, lr in PILOT:
            cfg = AdapterTrainConfig(alpha=100.0, epochs=epochs, learning_rate=lr, seed=1, hidden=64, init=init)
            ad = train_adapter(pairs, self._head(), cfg)
            sim = loss_fd(ad.forward(pairs.v_old), pairs.v_new)
            assert sim <= 0.05
            pinned = json.loads(FIXTURE.read_text())[init]
            assert sim == pytest.approx(pinned, rel=0.05, abs=1e-4)

    def test_trained_beats_untrained_on_holdout(self):
        _, pairs = _self_pairs(seed=2)
        cfg = AdapterTrainConfig(alpha=100.0, epochs=30, learning_rate=1e-3, seed=3, hidden=64, init="random")
        hist: list = []
        train_adapter(pairs, self._head(), cfg, history=hist)
        untrained = AdapterNetwork(8, 64, seed=3, init="random")
        hold = np.random.default_rng(3).permutation(len(pairs))[:int(0.1 * len(pairs))]
        base = loss_fd(untrained.forward(pairs.v_old[hold]), pairs.v_new[hold])
        assert len(hist) == 30
        assert hist[-1] < base

    def test_identity_init_is_identity(self):
        ad = AdapterNetwork(8, seed=0, init="identity", dtype=np.float64)
        v = np.random.default_rng(0).normal(size=(5, 8))
        np.testing.assert_allclose(ad.forward(v), v, atol=1e-12)
        with pytest.raises(DimensionError):
            AdapterNetwork(8, hidden=10, init="identity")

    def test_alpha_zero_is_classification(self):
        _, pairs = _self_pairs()
        head = self._head()
        ad = train_adapter(pairs, head, AdapterTrainConfig(alpha=0.0, epochs=1, seed=0, hidden=32))
        s = head.forward(ad.forward(pairs.v_old))
        from featrehearse.losses import loss_adapter
        assert loss_adapter(pairs.v_old, pairs.v_new, pairs.labels, head, ad, 0.0) == pytest.approx(
            loss_ce(s, np.eye(3)[pairs.labels]), rel=1e-6)

    def test_deterministic_and_pure(self):
        ext, pairs = _self_pairs()
        head = self._head()
        before = param_digest(head, ext)
        cfg = AdapterTrainConfig(epochs=3, seed=5, hidden=32)
        a = train_adapter(pairs, head, cfg)
        b = train_adapter(pairs, head, cfg)
        assert param_digest(a) == param_digest(b)
        assert param_digest(head, ext) == before

    def test_empty_pairs(self):
        empty = FeaturePairSet(np.zeros((0, 8), np.float32), np.zeros((0, 8), np.float32), np.zeros(0, np.int64))
        with pytest.raises(ConfigurationError):
            train_adapter(empty, self._head(), AdapterTrainConfig())

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            AdapterTrainConfig(alpha=-1)
        with pytest.raises(ConfigurationError):
            AdapterTrainConfig(epochs=0)


class TestAdaptMemory:
    def _mem(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(30, 6))
        return store_task_features(FeatureMemory(6, 4), np.abs(feats), np.arange(30) % 3, [0, 1, 2])

    def test_identity(self):
        mem = self._mem()
        out = adapt_memory(mem, _identity_adapter(6))
        assert out.counts() == mem.counts()
        for c in mem.classes:
            np.testing.assert_allclose(out.slots[c].descriptors, mem.slots[c].descriptors, atol=1e-6)
            np.testing.assert_array_equal(out.slots[c].adapt_count, mem.slots[c].adapt_count + 1)
            np.testing.assert_array_equal(out.slots[c].source, mem.slots[c].source)
        out.check()

    def test_renormalized(self):
        mem = self._mem()
        out = adapt_memory(mem, AdapterNetwork(6, hidden=12, seed=1, init="random"))
        assert out.counts() == mem.counts()
        for c in out.classes:
            np.testing.assert_allclose(np.linalg.norm(out.slots[c].descriptors, axis=1), 1, atol=1e-5)

    def test_empty(self):
        assert len(adapt_memory(FeatureMemory(6, 4), _identity_adapter(6))) == 0

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            adapt_memory(self._mem(), AdapterNetwork(5, hidden=10))
