import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnq.losses import (
    LossValue, entropy, forget_loss, kl_to_uniform, logits_loss, mean_entropy, retain_loss, total_loss,
)
from unlearnq.net import Layer, NetConfig, ParameterSet, forward, grad, init_params, softmax


def constant_net(logits, d=2):
    """Single affine layer that ignores its input and emits ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    cfg = NetConfig((d, len(logits)))
    return ParameterSet([Layer("fc0", np.zeros((d, len(logits))), logits.copy())]), cfg


class TestEntropy:
    def test_uniform_ten(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10), abs=1e-12)
        assert entropy(np.full(10, 0.1)) == pytest.approx(2.302585, abs=1e-6)

    def test_one_hot_zero(self):
        assert entropy(np.eye(5)[2]) == 0.0

    def test_coin(self):
        assert entropy([0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)

    def test_batched_rows(self):
        h = entropy(np.array([[0.5, 0.5], [1.0, 0.0]]))
        np.testing.assert_allclose(h, [np.log(2), 0.0], atol=1e-15)

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12).filter(lambda v: sum(v) > 1e-3))
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, raw):
        p = np.array(raw) / np.sum(raw)
        h = entropy(p)
        assert -1e-12 <= h <= np.log(len(p)) + 1e-12


class TestKL:
    def test_one_hot_ten(self):
        assert kl_to_uniform(np.eye(10)[0]) == pytest.approx(np.log(10), abs=1e-12)

    def test_uniform_zero(self):
        assert abs(kl_to_uniform(np.full(7, 1 / 7))) <= 1e-15

    def test_random_label_expected_target(self):
        k = 10
        p = np.full(k, 1 / (k - 1))
        p[0] = 0.0
        assert kl_to_uniform(p) == pytest.approx(np.log(k / (k - 1)), abs=1e-12)

    def test_duality(self, rng):
        for k in (2, 3, 10, 50):
            p = rng.dirichlet(np.full(k, 0.3), size=500)
            np.testing.assert_allclose(entropy(p) + kl_to_uniform(p), np.log(k), atol=1e-12)


class TestForgetLoss:
    def test_uniform_output_is_minimum(self, rng):
        params, cfg = constant_net(np.zeros(4))
        v = forget_loss(params, rng.standard_normal((6, 2)), cfg)
        assert v.kind == "forget"
        assert float(v) == pytest.approx(-np.log(4), abs=1e-12)

    def test_near_one_hot_output_is_zero(self, rng):
        params, cfg = constant_net([200.0, 0.0, 0.0])
        assert float(forget_loss(params, rng.standard_normal((3, 2)), cfg)) == pytest.approx(0.0, abs=1e-80)

    def test_mean_of_two(self):
        cfg = NetConfig((2, 3))
        params = ParameterSet([Layer("fc0", np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.5]]), np.zeros(3))])
        x = np.array([[0.3, -1.0], [2.0, 0.1]])
        h = entropy(softmax(forward(params, x, cfg)))
        assert float(forget_loss(params, x, cfg)) == pytest.approx(-(h[0] + h[1]) / 2, abs=1e-14)

    def test_bounded(self, rng):
        cfg = NetConfig((3, 8, 5))
        for seed in range(5):
            params = init_params(cfg, seed).scaled(3.0)
            v = float(forget_loss(params, rng.standard_normal((16, 3)), cfg))
            assert -np.log(5) - 1e-12 <= v <= 0.0

    def test_empty_batch(self):
        params, cfg = constant_net(np.zeros(3))
        with pytest.raises(ValueError):
            forget_loss(params, np.zeros((0, 2)), cfg)


class TestRetainLoss:
    def test_uniform_is_log_k(self, rng):
        params, cfg = constant_net(np.zeros(6))
        v = retain_loss(params, rng.standard_normal((4, 2)), [0, 1, 5, 3], cfg)
        assert float(v) == pytest.approx(np.log(6), abs=1e-12)

    def test_quarter_probability(self):
        # p = (0.25, 0.75) from logits (0, log 3)
        params, cfg = constant_net([0.0, np.log(3.0)])
        assert float(retain_loss(params, np.zeros((1, 2)), [0], cfg)) == pytest.approx(np.log(4), abs=1e-12)

    def test_confident_correct_near_zero(self):
        params, cfg = constant_net([0.0, 100.0])
        assert float(retain_loss(params, np.zeros((2, 2)), [1, 1], cfg)) == pytest.approx(0.0, abs=1e-40)

    def test_label_out_of_range(self):
        params, cfg = constant_net(np.zeros(3))
        with pytest.raises(ValueError):
            retain_loss(params, np.zeros((1, 2)), [3], cfg)


class TestTotalLoss:
    @pytest.mark.parametrize("f,r,beta,want", [
        (-1.0, 2.0, 1.0, 1.0),
        (0.7, 123.0, 0.0, 0.7),
        (-2.302585, 0.5, 2.0, -1.302585),
    ])
    def test_examples(self, f, r, beta, want):
        assert total_loss(f, r, beta) == pytest.approx(want, abs=1e-12)

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            total_loss(0.0, 1.0, -0.1)


class TestLossValue:
    def test_rejects_nonfinite_and_unknown(self):
        with pytest.raises(ValueError):
            LossValue(float("nan"), "retain")
        with pytest.raises(ValueError):
            LossValue(1.0, "bogus")


class TestLogitGradients:
    @pytest.mark.parametrize("kind", ["forget_entropy", "retain_ce", "negated_ce"])
    def test_matches_central_difference(self, rng, kind):
        z = rng.standard_normal((5, 4)) * 2
        y = rng.integers(0, 4, size=5)
        _, dz = logits_loss(kind, z, y)
        h = 1e-6
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            up, dn = z.copy(), z.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (logits_loss(kind, up, y)[0] - logits_loss(kind, dn, y)[0]) / (2 * h)
        np.testing.assert_allclose(dz, fd, atol=1e-8)


class TestDynamics:
    def test_forget_step_raises_entropy(self, rng):
        cfg = NetConfig((3, 16, 4))
        for seed in range(10):
            params = init_params(cfg, seed).scaled(2.0)
            x = rng.standard_normal((20, 3))
            before = mean_entropy(params, x, cfg)
            _, g = grad(params, x, None, "forget_entropy", cfg)
            after = mean_entropy(params - g.scaled(1e-3), x, cfg)
            assert after > before

    def test_wrong_label_training_collapses_entropy(self, rng):
        # cross-entropy on one fixed wrong label: entropy -> 0, KL to uniform -> log K
        k = 4
        cfg = NetConfig((2, 16, k))
        params = init_params(cfg, 0)
        x = rng.standard_normal((32, 2))
        y = np.full(32, 2)
        hs = []
        for epoch in range(60):
            for _ in range(10):
                _, g = grad(params, x, y, "retain_ce", cfg)
                params = params - g.scaled(0.5)
            hs.append(mean_entropy(params, x, cfg))
        assert all(b <= a + 1e-12 for a, b in zip(hs[::10], hs[10::10]))
        assert hs[-1] < 0.1
        kl = float(np.mean(kl_to_uniform(softmax(forward(params, x, cfg)))))
        assert kl == pytest.approx(np.log(k) - hs[-1], abs=1e-9)

    def test_forget_loss_training_reaches_uniform(self, rng):
        k = 5
        cfg = NetConfig((2, 16, k))
        params = init_params(cfg, 1)
        x = rng.standard_normal((32, 2))
        y = rng.integers(0, k, size=32)
        for _ in range(200):
            _, g = grad(params, x, y, "retain_ce", cfg)
            params = params - g.scaled(0.5)
        for _ in range(2000):
            _, g = grad(params, x, None, "forget_entropy", cfg)
            params = params - g.scaled(0.5)
        p = softmax(forward(params, x, cfg))
        tv = 0.5 * np.abs(p - 1 / k).sum(axis=1)
        assert tv.max() <= 0.05


class TestRandomLabelTarget:
    def test_monte_carlo_average(self):
        k, y, draws = 10, 3, 100_000
        rng = np.random.default_rng(7)
        wrong = (y + rng.integers(1, k, size=draws)) % k
        p_bar = np.bincount(wrong, minlength=k) / draws
        assert abs(p_bar[y]) <= 1e-3
        others = np.delete(p_bar, y)
        assert np.abs(others - 1 / (k - 1)).max() <= 5e-3
