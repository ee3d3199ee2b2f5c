import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featrehearse.losses import (
    LossWeights,
    OrchestrationError,
    loss_adapter,
    loss_adapter_backward,
    loss_ce,
    loss_ce_grad,
    loss_fd,
    loss_fd_grad,
    loss_kd,
    loss_kd_grad,
    loss_total,
    loss_total_backward,
)
from featrehearse.nn import AdapterNetwork, CosineHead, DimensionError, Extractor, Network

from .gradcheck import check_params, numeric_grad, rel_err


def bce_oracle(scores, target):
    """Direct scalar evaluation of -sum[y log p + (1-y) log(1-p)], p = 1/(1+e^-s)."""
    total = 0.0
    for s, y in zip(scores, target):
        p = 1.0 / (1.0 + math.exp(-s))
        total -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return total


def tiny_net(seed, d=6, k=3, dtype=np.float64):
    ext = Extractor(("conv:2:3", "relu", "pool", "flatten", f"dense:{d}"), (1, 6, 6), seed=seed, dtype=dtype)
    return Network(ext, CosineHead(d, k, seed=seed + 1, scale=2.0, dtype=dtype))


class TestCrossEntropy:
    def test_zero_scores(self):
        assert loss_ce([0.0, 0.0], [1, 0]) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert loss_ce([0.0, 0.0], [1, 0]) == pytest.approx(1.3863, abs=1e-4)

    def test_perfect_prediction(self):
        assert loss_ce([np.inf, -np.inf, -np.inf], [1, 0, 0]) < 1e-40

    def test_random_against_scalar_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.normal(scale=4, size=5)
            y = np.eye(5)[rng.integers(5)]
            assert loss_ce(s, y) == pytest.approx(bce_oracle(s, y), rel=1e-12)

    def test_large_scores_finite(self):
        assert np.isfinite(loss_ce([1e6, -1e6], [0, 1]))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(3, 4))
        y = np.eye(4)[rng.integers(4, size=3)]
        _, g = loss_ce_grad(s, y)
        for i in range(s.size):
            assert rel_err(numeric_grad(lambda: loss_ce(s, y), s, i), g.flat[i]) <= 1e-4


class TestDistillation:
    def test_minimum_at_target(self):
        old = np.array([0.3, -1.2, 2.0])
        entropy = sum(-(p * math.log(p) + (1 - p) * math.log(1 - p))
                      for p in 1 / (1 + np.exp(-old)))
        assert loss_kd(old, old) == pytest.approx(entropy, rel=1e-12)

    def test_half_target(self):
        assert loss_kd([0.0, 0.0], [0.0, 0.0]) == pytest.approx(2 * math.log(2))

    def test_zero_gradient_at_target(self):
        old = np.random.default_rng(0).normal(size=4)
        new = old.copy()
        _, g = loss_kd_grad(new, old)
        np.testing.assert_allclose(g, 0, atol=1e-15)
        for i in range(new.size):
            assert abs(numeric_grad(lambda: loss_kd(new, old), new, i)) < 1e-8

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_target_is_minimizer(self, seed):
        rng = np.random.default_rng(seed)
        old = rng.normal(scale=3, size=5)
        other = rng.normal(scale=3, size=5)
        assert loss_kd(old, old) <= loss_kd(other, old) + 1e-12

    def test_wider_head_uses_prefix(self):
        new = np.array([[0.1, 0.2, 5.0]])
        old = np.array([[0.1, 0.2]])
        v, g = loss_kd_grad(new, old)
        assert v == pytest.approx(loss_kd(new[:, :2], old))
        assert g[0, 2] == 0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            loss_kd([0.0, 1.0], [0.0, 1.0, 2.0])


class TestFeatureDistillation:
    def test_identities(self):
        v = np.array([0.3, -2.0, 1.1])
        assert abs(loss_fd(v, v)) <= 1e-9
        assert abs(loss_fd(-v, v) - 2.0) <= 1e-9
        assert abs(loss_fd([1.0, 0, 0], [0, 3.0, 0]) - 1.0) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 4, 7))
        assert 0.0 <= loss_fd(a, b) <= 2.0

    def test_gradient(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 3, 5))
        _, g = loss_fd_grad(a, b)
        for i in range(a.size):
            assert rel_err(numeric_grad(lambda: loss_fd(a, b), a, i), g.flat[i]) <= 1e-4


class TestTotal:
    def test_weights_zero_equals_ce_bitwise(self):
        rng = np.random.default_rng(0)
        net, frozen = tiny_net(0), tiny_net(5)
        x, y = rng.normal(size=(4, 1, 6, 6)), rng.integers(3, size=4)
        _, s = net.forward(x)
        ce = loss_ce(s, np.eye(3)[y])
        total = loss_total(x, y, net, frozen, LossWeights(0.0, 0.0, 0.0), task_index=2, n_old=2)
        assert total == ce

    def test_weighted_sum(self):
        w = LossWeights(1.0, 0.05)
        assert 1.0 + w.lambda_kd * 0.5 + w.gamma_fd * 0.2 == pytest.approx(1.51)

    def test_first_task_is_ce(self):
        rng = np.random.default_rng(1)
        net = tiny_net(1)
        x, y = rng.normal(size=(3, 1, 6, 6)), rng.integers(3, size=3)
        _, s = net.forward(x)
        assert loss_total(x, y, net, None, LossWeights(), task_index=1) == loss_ce(s, np.eye(3)[y])

    def test_missing_frozen(self):
        net = tiny_net(0)
        with pytest.raises(OrchestrationError):
            loss_total(np.zeros((1, 1, 6, 6)), [0], net, None, LossWeights(), task_index=2)

    def test_backward_value_matches(self):
        rng = np.random.default_rng(2)
        net, frozen = tiny_net(2), tiny_net(3)
        x, y = rng.normal(size=(3, 1, 6, 6)), rng.integers(3, size=3)
        w = LossWeights(1.0, 0.3)
        val, _ = loss_total_backward(x, y, net, frozen, w, task_index=2, n_old=2)
        assert val == pytest.approx(loss_total(x, y, net, frozen, w, task_index=2, n_old=2), rel=1e-12)

    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(3)
        net, frozen = tiny_net(4, d=8, k=4), tiny_net(9, d=8, k=4)
        x, y = rng.normal(size=(4, 1, 6, 6)), rng.integers(4, size=4)
        w = LossWeights(1.0, 0.5)

        def backward():
            net.zero_grad()
            loss_total_backward(x, y, net, frozen, w, task_index=2, n_old=3)
            return {k: g.copy() for k, g in net.named_grads()}

        worst = check_params(lambda: loss_total(x, y, net, frozen, w, 2, 3), backward,
                             list(net.named_parameters()), rng)
        assert worst <= 1e-4


class TestAdapterLoss:
    def _setup(self, seed=0, d=5, k=3):
        rng = np.random.default_rng(seed)
        head = CosineHead(d, k, seed=seed, scale=4.0, dtype=np.float64)
        ad = AdapterNetwork(d, hidden=9, seed=seed, dtype=np.float64)
        return rng, head, ad

    def test_alpha_zero_is_classification(self):
        rng, head, ad = self._setup()
        vo, vn = rng.normal(size=(2, 4, 5))
        y = rng.integers(3, size=4)
        s = head.forward(ad.forward(vo))
        assert loss_adapter(vo, vn, y, head, ad, 0.0) == pytest.approx(loss_ce(s, np.eye(3)[y]))

    def test_similarity_term_zero_when_matched(self):
        rng, head, ad = self._setup(1)
        vo = rng.normal(size=(3, 5))
        vn = ad.forward(vo) * 2.5
        y = rng.integers(3, size=3)
        s = head.forward(ad.forward(vo))
        assert loss_adapter(vo, vn, y, head, ad, 100.0) == pytest.approx(loss_ce(s, np.eye(3)[y]), abs=1e-9)

    def test_gradient_and_frozen_head(self):
        rng, head, ad = self._setup(2)
        vo, vn = rng.normal(size=(2, 4, 5))
        y = rng.integers(3, size=4)
        w_before = head.params["w"].copy()
        g_before = {k: v.copy() for k, v in head.grads.items()}

        def backward():
            ad.zero_grad()
            loss_adapter_backward(vo, vn, y, head, ad, 10.0)
            return {k: g.copy() for k, g in ad.named_grads()}

        worst = check_params(lambda: loss_adapter(vo, vn, y, head, ad, 10.0), backward,
                             list(ad.named_parameters()), rng)
        assert worst <= 1e-4
        np.testing.assert_array_equal(head.params["w"], w_before)
        for k in g_before:
            np.testing.assert_array_equal(head.grads[k], g_before[k])


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0, 0)
