"""Tests for the few-shot probe solvers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probeset.core import ProbeWeights, class_probabilities
from probeset.probes import (
    ClassSums,
    GdConfig,
    LambdaPolicy,
    ProbeDivergenceError,
    SupportSet,
    gd_lp_fit,
    loss_terms,
    simpleshot_fit,
    sstext_class_sums,
    sstext_fit,
    sstext_fit_incremental,
)


def random_instance(seed, n=12, c=3, d=4):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    labels = rng.integers(0, c, size=n)
    text = rng.normal(size=(c, d))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    return SupportSet(feats, labels), ProbeWeights(text)


class TestSupportSet:
    def test_coerces_dtypes(self):
        s = SupportSet([[1, 2]], [0])
        assert s.features.dtype == np.float64
        assert s.labels.dtype == np.int64
        assert s.num_samples == 1 and s.dim == 2

    def test_empty_support_allowed(self):
        # The transductive path starts from an empty base in the
        # zero-shot degenerate case.
        s = SupportSet(np.zeros((0, 3)), np.zeros(0, dtype=int))
        assert s.num_samples == 0 and s.dim == 3

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            SupportSet(np.zeros((2, 3)), [0])

    def test_rejects_negative_labels(self):
        with pytest.raises(ValueError):
            SupportSet(np.zeros((1, 3)), [-1])

    def test_append(self):
        s = SupportSet([[1.0, 0.0]], [0]).append(np.array([0.0, 1.0]), 1)
        assert s.num_samples == 2
        assert s.labels.tolist() == [0, 1]


class TestLambdaPolicy:
    def test_adaptive_value(self):
        assert LambdaPolicy().resolve(n=10, tau=0.5) == pytest.approx(0.2)

    def test_fixed_value(self):
        p = LambdaPolicy("fixed", fixed_value=2.0)
        assert p.resolve(n=10, tau=0.5) == pytest.approx(4.0)
        assert p.resolve(n=999, tau=0.5) == pytest.approx(4.0)

    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError, match="lambda mode"):
            LambdaPolicy("decaying")

    def test_rejects_empty_support(self):
        with pytest.raises(ValueError):
            LambdaPolicy().resolve(n=0, tau=1.0)


class TestClassSums:
    def test_hand_example(self):
        s = SupportSet([[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]], [0, 0, 1])
        sums = sstext_class_sums(s, num_classes=3)
        np.testing.assert_array_equal(sums.sums, [[3.0, 1.0], [0.0, 3.0], [0.0, 0.0]])
        assert sums.counts.tolist() == [2, 1, 0]
        assert sums.num_samples == 3

    def test_label_out_of_range(self):
        s = SupportSet([[1.0, 0.0]], [5])
        with pytest.raises(ValueError, match="5"):
            sstext_class_sums(s, num_classes=2)

    def test_empty_support_gives_zero_sums(self):
        empty = SupportSet(np.zeros((0, 2)), np.zeros(0, dtype=int))
        sums = sstext_class_sums(empty, num_classes=4)
        np.testing.assert_array_equal(sums.sums, np.zeros((4, 2)))
        assert sums.counts.tolist() == [0, 0, 0, 0]
        assert sums.num_samples == 0

    def test_duplicated_sample_doubles_sum(self):
        s = SupportSet([[1.0, 2.0], [1.0, 2.0]], [0, 0])
        sums = sstext_class_sums(s)
        np.testing.assert_array_equal(sums.sums, [[2.0, 4.0]])

    def test_infers_num_classes(self):
        s = SupportSet([[1.0, 0.0]], [2])
        assert sstext_class_sums(s).num_classes == 3

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ClassSums(np.zeros((2, 3)), np.zeros(3, dtype=int))


class TestSstextFit:
    def test_adaptive_is_text_plus_sums(self):
        # Adaptive penalty makes the scaling coefficient exactly one, so
        # the fit must be bit-identical to prototype-plus-sum.
        support = SupportSet([[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]], [0, 0, 1])
        text = ProbeWeights(np.eye(2))
        w = sstext_fit(support, text, tau=0.07)
        np.testing.assert_array_equal(w.matrix, [[4.0, 1.0], [0.0, 4.0]])

    def test_adaptive_independent_of_tau(self):
        support, text = random_instance(0)
        a = sstext_fit(support, text, tau=0.01)
        b = sstext_fit(support, text, tau=7.0)
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_fixed_coefficient(self):
        support = SupportSet([[6.0, 0.0], [0.0, 6.0], [6.0, 6.0]], [0, 1, 1])
        text = ProbeWeights(np.eye(2))
        w = sstext_fit(support, text, tau=0.5, policy=LambdaPolicy("fixed", 2.0))
        # coefficient = 1 / (fixed_value * n) = 1/6
        np.testing.assert_allclose(w.matrix, [[2.0, 0.0], [1.0, 3.0]], atol=1e-15)

    @pytest.mark.parametrize(
        "policy", [LambdaPolicy(), LambdaPolicy("fixed", 0.1), LambdaPolicy("fixed", 10.0)]
    )
    def test_solution_is_stationary(self, policy):
        # The closed form must zero the gradient of the surrogate objective
        # (linear part plus ridge) it minimizes.
        support, text = random_instance(1)
        tau = 0.3
        w = sstext_fit(support, text, tau, policy)
        lam = policy.resolve(support.num_samples, tau)
        terms = loss_terms(w, support, text, tau, lam)
        np.testing.assert_allclose(terms.linear_grad, 0.0, atol=1e-12)

    def test_missing_class_falls_back_to_prototype(self):
        # Class 2 has no shots; its row must stay the text prototype.
        support = SupportSet([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        text = ProbeWeights(np.random.default_rng(20).normal(size=(3, 2)))
        w = sstext_fit(support, text, tau=1.0)
        np.testing.assert_array_equal(w.matrix[2], text.matrix[2])

    def test_one_shot_per_class_adds_each_shot(self):
        support = SupportSet([[0.0, 2.0], [3.0, 0.0]], [0, 1])
        text = ProbeWeights(np.eye(2))
        w = sstext_fit(support, text, tau=0.01)
        np.testing.assert_array_equal(w.matrix, [[1.0, 2.0], [3.0, 1.0]])

    def test_empty_support_rejected(self):
        _, text = random_instance(2)
        empty = SupportSet(np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="at least one example"):
            sstext_fit(empty, text, tau=1.0)

    def test_permutation_invariant(self):
        support, text = random_instance(21, n=12, c=3, d=4)
        order = np.random.default_rng(22).permutation(12)
        a = sstext_fit(support, text, tau=0.3)
        b = sstext_fit(support.permuted(order), text, tau=0.3)
        np.testing.assert_allclose(b.matrix, a.matrix, atol=1e-12)

    def test_dim_mismatch(self):
        support, _ = random_instance(2, d=4)
        with pytest.raises(ValueError, match="dim"):
            sstext_fit(support, ProbeWeights(np.eye(3)), tau=1.0)


class TestSstextIncremental:
    @pytest.mark.parametrize("policy", [LambdaPolicy(), LambdaPolicy("fixed", 3.0)])
    @pytest.mark.parametrize("label", [0, 1, 2])
    def test_matches_batch_refit(self, policy, label):
        support, text = random_instance(3, n=9, c=3, d=5)
        extra = np.random.default_rng(99).normal(size=5)
        sums = sstext_class_sums(support, 3)
        fast = sstext_fit_incremental(sums, text, 0.2, extra, label, policy)
        slow = sstext_fit(support.append(extra, label), text, tau=0.2, policy=policy)
        np.testing.assert_array_equal(fast.matrix, slow.matrix)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_matches_batch_refit_property(self, seed, label):
        support, text = random_instance(seed, n=6, c=3, d=4)
        extra = np.random.default_rng(seed + 1).normal(size=4)
        sums = sstext_class_sums(support, 3)
        fast = sstext_fit_incremental(sums, text, 0.05, extra, label)
        slow = sstext_fit(support.append(extra, label), text, tau=0.05)
        np.testing.assert_array_equal(fast.matrix, slow.matrix)

    def test_only_target_row_changes_under_adaptive(self):
        support, text = random_instance(4)
        sums = sstext_class_sums(support, 3)
        base = sstext_fit(support, text, tau=1.0)
        bumped = sstext_fit_incremental(sums, text, 1.0, np.ones(4), 1)
        np.testing.assert_array_equal(bumped.matrix[[0, 2]], base.matrix[[0, 2]])
        assert not np.array_equal(bumped.matrix[1], base.matrix[1])

    def test_empty_base_gives_prototype_plus_feature(self):
        _, text = random_instance(5)
        empty = SupportSet(np.zeros((0, 4)), np.zeros(0, dtype=int))
        sums = sstext_class_sums(empty, num_classes=3)
        v = np.array([1.0, 2.0, 3.0, 4.0])
        w = sstext_fit_incremental(sums, text, 0.5, v, 2)
        np.testing.assert_array_equal(w.matrix[:2], text.matrix[:2])
        np.testing.assert_array_equal(w.matrix[2], text.matrix[2] + v)

    def test_rejects_bad_label(self):
        support, text = random_instance(6)
        sums = sstext_class_sums(support, 3)
        with pytest.raises(ValueError, match="out of range"):
            sstext_fit_incremental(sums, text, 1.0, np.ones(4), 3)

    def test_rejects_bad_dim(self):
        support, text = random_instance(7)
        sums = sstext_class_sums(support, 3)
        with pytest.raises(ValueError, match="dimension"):
            sstext_fit_incremental(sums, text, 1.0, np.ones(5), 0)


class TestSimpleshot:
    def test_hand_centroids(self):
        s = SupportSet([[1.0, 1.0], [3.0, 1.0], [0.0, 2.0]], [0, 0, 1])
        w = simpleshot_fit(s)
        np.testing.assert_allclose(w.matrix, [[2.0, 1.0], [0.0, 2.0]], atol=1e-15)

    def test_missing_class_rejected(self):
        s = SupportSet([[1.0, 0.0]], [0])
        with pytest.raises(ValueError, match="no support examples: 1, 2"):
            simpleshot_fit(s, num_classes=3)

    def test_infers_class_count(self):
        s = SupportSet([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        assert simpleshot_fit(s).num_classes == 2

    def test_permutation_invariant(self):
        support, _ = random_instance(23, n=12, c=3, d=4)
        order = np.random.default_rng(24).permutation(12)
        a = simpleshot_fit(support, 3)
        b = simpleshot_fit(support.permuted(order), 3)
        np.testing.assert_allclose(b.matrix, a.matrix, atol=1e-12)


class TestGdLpFit:
    def test_reduces_loss_on_separable_data(self):
        support, text = random_instance(7, n=30, c=3, d=8)
        tau = 1.0
        fitted = gd_lp_fit(support, text, tau, GdConfig(epochs=50))
        before = loss_terms(text, support, text, tau, 0.0).total
        after = loss_terms(fitted, support, text, tau, 0.0).total
        assert after < before

    def test_matches_manual_momentum_loop(self):
        support, text = random_instance(8, n=10, c=3, d=4)
        tau, lam = 0.4, 0.3
        cfg = GdConfig(epochs=3, momentum=0.9, initial_lr=0.05, schedule="constant", lam=lam)
        w = text.matrix.copy()
        vel = np.zeros_like(w)
        for _ in range(cfg.epochs):
            g = loss_terms(ProbeWeights(w), support, text, tau, lam).full_grad
            vel = cfg.momentum * vel + g
            w = w - cfg.initial_lr * vel
        fitted = gd_lp_fit(support, text, tau, cfg)
        np.testing.assert_allclose(fitted.matrix, w, atol=1e-12)

    def test_cosine_schedule_values(self):
        cfg = GdConfig(epochs=100, initial_lr=0.1)
        assert cfg.lr_at(0) == pytest.approx(0.1)
        assert cfg.lr_at(50) == pytest.approx(0.05)
        assert cfg.lr_at(99) < 0.0001

    def test_divergence_reports_epoch(self):
        # An enormous ridge weight with the default step size makes the
        # iteration explode geometrically until the loss overflows.
        support, text = random_instance(9)
        with pytest.raises(ProbeDivergenceError, match="epoch") as exc:
            gd_lp_fit(support, text, tau=1.0, config=GdConfig(lam=1e6))
        assert 0 < exc.value.epoch <= 300

    def test_zero_penalty_starts_at_prototypes(self):
        # One epoch at lr 0 is a no-op; confirms initialization.
        support, text = random_instance(10)
        cfg = GdConfig(epochs=1, momentum=0.0, initial_lr=1e-300, schedule="constant")
        fitted = gd_lp_fit(support, text, tau=1.0, config=cfg)
        np.testing.assert_allclose(fitted.matrix, text.matrix, atol=1e-12)

    def test_huge_penalty_pins_weights_to_prototypes(self):
        # lam=1e6 needs a step size inside the stability region
        # (lr * lam < 2); the solution then sits next to the prototypes.
        support, text = random_instance(18, n=20, c=3, d=6)
        cfg = GdConfig(lam=1e6, initial_lr=1e-9)
        fitted = gd_lp_fit(support, text, tau=1.0, config=cfg)
        assert np.max(np.abs(fitted.matrix - text.matrix)) < 1e-3

    def test_separable_two_class_reaches_full_accuracy(self):
        rng = np.random.default_rng(19)
        a = rng.normal([3, 0], 0.1, size=(8, 2))
        b = rng.normal([-3, 0], 0.1, size=(8, 2))
        feats = np.vstack([a, b])
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        support = SupportSet(feats, [0] * 8 + [1] * 8)
        text = ProbeWeights(np.array([[0.0, 1.0], [0.0, -1.0]]))  # unhelpful start
        fitted = gd_lp_fit(support, text, tau=0.1)
        preds = np.argmax(support.features @ fitted.matrix.T, axis=1)
        assert np.array_equal(preds, support.labels)

    def test_permutation_invariant(self):
        support, text = random_instance(25, n=12, c=3, d=4)
        order = np.random.default_rng(26).permutation(12)
        cfg = GdConfig(epochs=60)
        a = gd_lp_fit(support, text, tau=0.5, config=cfg)
        b = gd_lp_fit(support.permuted(order), text, tau=0.5, config=cfg)
        np.testing.assert_allclose(b.matrix, a.matrix, atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GdConfig(epochs=0)
        with pytest.raises(ValueError):
            GdConfig(momentum=1.0)
        with pytest.raises(ValueError):
            GdConfig(initial_lr=0.0)
        with pytest.raises(ValueError):
            GdConfig(schedule="linear")
        with pytest.raises(ValueError):
            GdConfig(lam=-1.0)


def central_difference(f, w0, eps=1e-6):
    g = np.zeros_like(w0)
    for i in range(w0.shape[0]):
        for j in range(w0.shape[1]):
            wp = w0.copy()
            wp[i, j] += eps
            wm = w0.copy()
            wm[i, j] -= eps
            g[i, j] = (f(wp) - f(wm)) / (2 * eps)
    return g


class TestLossTerms:
    def test_total_matches_cross_entropy(self):
        support, text = random_instance(11, n=15, c=4, d=6)
        tau, lam = 0.5, 0.7
        w = ProbeWeights(np.random.default_rng(12).normal(size=(4, 6)))
        terms = loss_terms(w, support, text, tau, lam)
        probs = class_probabilities(support.features, w, tau)
        ce = -np.mean(np.log(probs[np.arange(15), support.labels]))
        reg = 0.5 * lam * np.sum((w.matrix - text.matrix) ** 2)
        assert terms.total == pytest.approx(ce + reg, rel=1e-10)

    def test_linear_grad_against_finite_differences(self):
        support, text = random_instance(13, n=8, c=3, d=4)
        tau, lam = 0.8, 0.9
        w0 = np.random.default_rng(14).normal(size=(3, 4))

        def linear_part(w):
            return loss_terms(ProbeWeights(w), support, text, tau, lam).linear

        analytic = loss_terms(ProbeWeights(w0), support, text, tau, lam).linear_grad
        numeric = central_difference(linear_part, w0)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_full_grad_against_finite_differences(self):
        support, text = random_instance(15, n=8, c=3, d=4)
        tau, lam = 0.8, 0.4
        w0 = np.random.default_rng(16).normal(size=(3, 4))

        def total(w):
            return loss_terms(ProbeWeights(w), support, text, tau, lam).total

        analytic = loss_terms(ProbeWeights(w0), support, text, tau, lam).full_grad
        numeric = central_difference(total, w0)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_rejects_negative_lam(self):
        support, text = random_instance(17)
        with pytest.raises(ValueError):
            loss_terms(text, support, text, 1.0, -0.1)


class TestSolverAgreement:
    def test_sstext_tracks_centroids_on_separated_clusters(self):
        # with 16 shots per class the class sums dwarf the text prototype
        # term, so the closed form and the pure centroid probe should pick
        # the same class almost everywhere
        from probeset.data import SynthConfig, generate_synthetic, sample_balanced_shots

        bundle = generate_synthetic(
            SynthConfig(
                num_classes=5, dim=32, train_per_class=16, test_size=400,
                concentration=4.0, separation=2.0, temperature=1.0, seed=42,
            )
        )
        support = sample_balanced_shots(bundle, 16, seed=0)
        text = ProbeWeights(bundle.text_prototypes)
        w_sum = sstext_fit(support, text, tau=bundle.temperature)
        w_centroid = simpleshot_fit(support, bundle.num_classes)
        test_feats = bundle.features[bundle.split("test")]
        pred_sum = np.argmax(test_feats @ w_sum.matrix.T, axis=1)
        pred_centroid = np.argmax(test_feats @ w_centroid.matrix.T, axis=1)
        assert np.mean(pred_sum == pred_centroid) >= 0.95
