import math

import numpy as np
import pytest

from oracles import bce_oracle, finite_difference, hinge_oracle

from ehrfuse import losses
from ehrfuse.losses import LossConfig
from ehrfuse.records import ValidationError


class TestBce:
    def test_perfect_prediction_is_effectively_zero(self):
        eps = 1e-7
        loss = losses.bce_loss([1, 0], [1 - eps, eps], eps=eps)
        assert loss == pytest.approx(2 * -math.log1p(-eps), abs=1e-12)
        assert loss < 1e-6

    def test_coin_flip_single_label(self):
        assert losses.bce_loss([1], [0.5]) == pytest.approx(0.6931471805599453, abs=1e-12)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = rng.integers(0, 2, size=(6, 10)).astype(float)
            p = rng.uniform(1e-4, 1 - 1e-4, size=(6, 10))
            assert losses.bce_loss(t, p) == pytest.approx(bce_oracle(t, p), abs=1e-12)

    def test_mean_reduction_divides_by_batch(self):
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.7, 0.2], [0.4, 0.9]])
        assert losses.bce_loss(t, p, reduction="mean") == pytest.approx(
            losses.bce_loss(t, p) / 2, abs=1e-15
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            losses.bce_loss([1, 0], [0.5])

    def test_strictly_decreases_toward_target(self):
        t = np.array([1.0, 0.0, 1.0])
        p = np.array([0.4, 0.4, 0.6])
        base = losses.bce_loss(t, p)
        for i, direction in enumerate([+0.1, -0.1, +0.1]):
            q = p.copy()
            q[i] += direction
            assert losses.bce_loss(t, q) < base


class TestHinge:
    def test_hand_case(self):
        # one positive/negative pair, margin 1 - 0.7 = 0.3
        assert losses.hinge_loss([1, 0], [0.9, 0.2]) == pytest.approx(0.3, abs=1e-15)

    def test_satisfied_margin_is_zero(self):
        assert losses.hinge_loss([1, 0], [2.0, 0.5]) == 0.0

    def test_all_positive_labels_zero(self):
        assert losses.hinge_loss([1, 1, 1], [0.2, 0.5, 0.9]) == 0.0

    def test_all_negative_labels_zero(self):
        assert losses.hinge_loss([0, 0], [0.2, 0.5]) == 0.0

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            t = rng.integers(0, 2, size=(5, 8)).astype(float)
            s = rng.normal(size=(5, 8))
            assert losses.hinge_loss(t, s) == pytest.approx(hinge_oracle(t, s), abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        t = rng.integers(0, 2, size=(4, 10)).astype(float)
        s = rng.normal(size=(4, 10))
        base = losses.hinge_loss(t, s)
        for shift in (-3.0, 0.5, 100.0):
            assert losses.hinge_loss(t, s + shift) == pytest.approx(base, abs=1e-12)

    def test_divides_by_batch_size_including_pairless_samples(self):
        t = [[1, 0], [1, 1]]  # second sample has no negatives
        s = [[0.9, 0.2], [0.5, 0.5]]
        assert losses.hinge_loss(t, s) == pytest.approx(0.3 / 2, abs=1e-15)


class TestCombined:
    def test_alpha_one_is_exactly_bce(self):
        rng = np.random.default_rng(3)
        t = rng.integers(0, 2, size=(3, 10)).astype(float)
        p = rng.uniform(0.01, 0.99, size=(3, 10))
        cfg = LossConfig(alpha=1.0)
        assert losses.combined_loss(t, p, cfg) == losses.bce_loss(t, p)

    def test_alpha_zero_is_exactly_hinge(self):
        rng = np.random.default_rng(4)
        t = rng.integers(0, 2, size=(3, 10)).astype(float)
        p = rng.uniform(0.01, 0.99, size=(3, 10))
        cfg = LossConfig(alpha=0.0)
        assert losses.combined_loss(t, p, cfg) == losses.hinge_loss(t, p)

    def test_default_mix_matches_sub_oracles(self):
        cfg = LossConfig(alpha=0.95)
        t, p = [[1, 0]], [[0.5, 0.2]]
        value = losses.combined_loss(t, p, cfg)
        expected = 0.95 * bce_oracle(t, p) + 0.05 * hinge_oracle(t, p)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_two_label_documented_case(self):
        # single positive at 0.5 gives bce=-log 0.5; pair margin 0.3 from the
        # hinge hand case; alpha=0.95 mixes them to 0.673490
        bce = losses.bce_loss([1], [0.5])
        hinge = losses.hinge_loss([1, 0], [0.9, 0.2])
        mixed = 0.95 * bce + 0.05 * hinge
        assert mixed == pytest.approx(0.6734898215319483, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            t = rng.integers(0, 2, size=(4, 6)).astype(float)
            p = rng.uniform(1e-6, 1 - 1e-6, size=(4, 6))
            assert losses.combined_loss(t, p, LossConfig(alpha=float(rng.uniform()))) >= 0.0

    def test_logit_space_hinge_variant(self):
        t = np.array([[1.0, 0.0]])
        p = np.array([[0.6, 0.4]])
        z = np.array([[2.0, -1.0]])
        cfg = LossConfig(alpha=0.5, hinge_scores="logits")
        expected = 0.5 * losses.bce_loss(t, p) + 0.5 * losses.hinge_loss(t, z)
        assert losses.combined_loss(t, p, cfg, logits=z) == pytest.approx(expected, abs=1e-15)

    def test_logit_hinge_requires_logits(self):
        with pytest.raises(ValidationError, match="logits"):
            losses.combined_loss([[1, 0]], [[0.6, 0.4]], LossConfig(hinge_scores="logits"))


class TestGradients:
    def test_grad_matches_finite_differences_away_from_kinks(self):
        rng = np.random.default_rng(6)
        cfg = LossConfig(alpha=0.95)
        for _ in range(10):
            t = rng.integers(0, 2, size=(3, 6)).astype(float)
            p0 = rng.uniform(0.15, 0.85, size=(3, 6))

            def f(flat):
                return losses.combined_loss(t, flat.reshape(3, 6), cfg)

            analytic = (
                cfg.alpha * losses.bce_grad(t, p0)
                + (1 - cfg.alpha) * losses.hinge_grad(t, p0)
            )
            fd = finite_difference(f, p0.ravel()).reshape(3, 6)
            np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)

    def test_logit_grad_chains_through_sigmoid(self):
        rng = np.random.default_rng(7)
        t = rng.integers(0, 2, size=(2, 5)).astype(float)
        z0 = rng.normal(size=(2, 5))
        cfg = LossConfig(alpha=0.95)

        def f(flat):
            z = flat.reshape(2, 5)
            p = 1.0 / (1.0 + np.exp(-z))
            return losses.combined_loss(t, p, cfg, z)

        p0 = 1.0 / (1.0 + np.exp(-z0))
        analytic = losses.combined_logit_grad(t, p0, z0, cfg)
        fd = finite_difference(f, z0.ravel()).reshape(2, 5)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)

    def test_activity_signature_flags_kink_crossings(self):
        # logit-space hinge with a pair sitting exactly at the margin; nudging
        # the positive score across it must change the signature
        cfg = LossConfig(alpha=0.0, hinge_scores="logits")
        t = np.array([[1.0, 0.0]])
        at_kink = np.array([[1.0, 0.0]])  # margin = 1 - (1 - 0) = 0 exactly
        p = np.array([[0.7, 0.5]])
        below = at_kink.copy()
        below[0, 0] -= 1e-4  # margin +1e-4, pair active
        above = at_kink.copy()
        above[0, 0] += 1e-4  # margin -1e-4, pair inactive
        assert losses.activity_signature(t, p, below, cfg) != losses.activity_signature(
            t, p, above, cfg
        )
        assert losses.min_kink_distance(t, p, at_kink, cfg) == 0.0

    def test_probability_hinge_has_no_reachable_kink(self):
        rng = np.random.default_rng(8)
        cfg = LossConfig()
        for _ in range(50):
            t = rng.integers(0, 2, size=(3, 6)).astype(float)
            p = rng.uniform(1e-6, 1 - 1e-6, size=(3, 6))
            dist = losses.min_kink_distance(t, p, None, cfg)
            assert dist > 0.0


class TestConfigValidation:
    def test_alpha_bounds(self):
        with pytest.raises(ValidationError, match="alpha"):
            losses.validate_loss_config(LossConfig(alpha=1.5))

    def test_eps_bounds(self):
        with pytest.raises(ValidationError, match="bce_eps"):
            losses.validate_loss_config(LossConfig(bce_eps=0.0))

    def test_defaults_valid(self):
        losses.validate_loss_config(LossConfig())
        assert LossConfig().alpha == 0.95
