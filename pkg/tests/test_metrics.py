"""Metric units: exact hand cases plus structural properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnd.metrics import (
    accuracy,
    aupr,
    auroc,
    ece,
    ged,
    iou_distance,
    mean_nll,
    ood_scores,
    reliability_bins,
)


def two_class_probs(confidences):
    """Rows [c, 1-c]: class-0 confidence c."""
    c = np.asarray(confidences, dtype=np.float64)
    return np.stack([c, 1.0 - c], axis=1)


class TestEce:
    def test_perfectly_calibrated_hand_case(self):
        # 5 examples at confidence 0.6 with 3 correct, 10 at 0.9 with 9
        # correct: both bins have zero gap, so ECE is exactly 0.
        conf = [0.6] * 5 + [0.9] * 10
        probs = two_class_probs(conf)
        labels = np.array([0, 0, 0, 1, 1] + [0] * 9 + [1])
        assert ece(probs, labels, n_bins=15) == 0.0

    def test_all_confident_and_correct(self):
        probs = two_class_probs([1.0] * 7)
        labels = np.zeros(7, dtype=int)
        assert ece(probs, labels) == 0.0

    def test_all_confident_and_wrong(self):
        probs = two_class_probs([1.0] * 7)
        labels = np.ones(7, dtype=int)
        assert ece(probs, labels) == 1.0

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            ece(np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError):
            ece(np.array([[0.9, 0.3]]), np.array([0]))

    @settings(deadline=None)
    @given(st.lists(st.tuples(st.floats(0.5, 1.0), st.integers(0, 1)),
                    min_size=1, max_size=64), st.randoms())
    def test_in_unit_interval_and_order_invariant(self, rows, rnd):
        conf = [c for c, _ in rows]
        labels = np.array([l for _, l in rows])
        probs = two_class_probs(conf)
        val = ece(probs, labels)
        assert 0.0 <= val <= 1.0
        perm = list(range(len(rows)))
        rnd.shuffle(perm)
        assert math.isclose(val, ece(probs[perm], labels[perm]), abs_tol=1e-12)

    def test_reliability_rows_cover_bins(self):
        probs = two_class_probs([0.55, 0.65, 0.95, 0.95])
        labels = np.array([0, 1, 0, 0])
        rows = reliability_bins(probs, labels, n_bins=10)
        assert len(rows) == 10
        assert sum(count for _, _, count in rows) == 4


class TestRankMetrics:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert aupr([0.9, 0.8], [0.1, 0.2]) == 1.0

    def test_identical_distributions(self):
        assert auroc([0.5, 0.5], [0.5, 0.5]) == 0.5

    def test_pairwise_example(self):
        # pairs: (.9,.5)+ (.9,.1)+ (.4,.5)- (.4,.1)+  -> 3/4
        assert auroc([0.9, 0.4], [0.5, 0.1]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [0.5])
        with pytest.raises(ValueError):
            aupr([0.5], [])

    @settings(deadline=None)
    @given(
        st.lists(st.integers(-100, 100), min_size=1, max_size=32),
        st.lists(st.integers(-100, 100), min_size=1, max_size=32),
    )
    def test_auroc_invariant_under_monotone_transforms(self, pos, neg):
        # integer scores so the transforms are exactly rank-preserving in
        # float arithmetic (ties stay ties, non-ties stay apart)
        base = auroc(pos, neg)
        transforms = (
            lambda s: 3.0 * np.asarray(s, dtype=np.float64) + 1.0,
            lambda s: np.asarray(s, dtype=np.float64) ** 3,
        )
        for f in transforms:
            assert math.isclose(base, auroc(f(pos), f(neg)), abs_tol=1e-12)

    def test_aupr_prefers_early_positives(self):
        good = aupr([0.9, 0.8, 0.7], [0.6, 0.5, 0.4])
        bad = aupr([0.6, 0.5, 0.4], [0.9, 0.8, 0.7])
        assert good == 1.0
        assert bad < 0.6


class TestOodScores:
    def test_one_hot_scores_zero(self):
        probs = np.array([[1.0, 0.0, 0.0]])
        assert ood_scores(probs)[0] == 0.0

    def test_uniform_ten_classes(self):
        probs = np.full((1, 10), 0.1)
        assert abs(ood_scores(probs)[0] - 0.9) < 1e-12

    def test_binary_example(self):
        probs = np.array([[0.7, 0.3]])
        assert abs(ood_scores(probs)[0] - 0.3) < 1e-12

    def test_entropy_flag(self):
        probs = np.full((1, 4), 0.25)
        assert abs(ood_scores(probs, "entropy")[0] - math.log(4)) < 1e-12
        with pytest.raises(ValueError):
            ood_scores(probs, "nonsense")


class TestGed:
    A = np.array([[1, 1], [0, 0]], dtype=bool)
    B = np.array([[1, 0], [0, 0]], dtype=bool)

    def test_identical_singletons(self):
        assert ged([self.A], [self.A]) == 0.0

    def test_two_singletons_closed_form(self):
        d = iou_distance(self.A, self.B)  # 1 - 1/2
        got = ged([self.A], [self.B])
        assert abs(got - math.sqrt(2.0 * d)) < 1e-12

    def test_symmetry(self):
        sa = [self.A, self.B]
        sb = [np.zeros_like(self.A), self.A]
        assert math.isclose(ged(sa, sb), ged(sb, sa), abs_tol=1e-12)

    def test_empty_masks_are_identical(self):
        empty = np.zeros((2, 2), dtype=bool)
        assert iou_distance(empty, empty) == 0.0
        assert ged([empty], [empty]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            ged([], [self.A])
        with pytest.raises(ValueError):
            iou_distance(self.A, np.zeros((3, 3), dtype=bool))

    @settings(deadline=None, max_examples=40)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
    def test_nonnegative_on_random_sets(self, na, nb, seed):
        rng = np.random.default_rng(seed)
        sa = [rng.integers(0, 2, size=(3, 3)).astype(bool) for _ in range(na)]
        sb = [rng.integers(0, 2, size=(3, 3)).astype(bool) for _ in range(nb)]
        assert ged(sa, sb) >= 0.0


class TestAccuracyNll:
    def test_accuracy(self):
        probs = two_class_probs([0.9, 0.2, 0.8])
        labels = np.array([0, 1, 1])
        assert abs(accuracy(probs, labels) - 2 / 3) < 1e-12

    def test_mean_nll(self):
        probs = two_class_probs([0.5, 0.25])
        labels = np.array([0, 1])
        expected = -(math.log(0.5) + math.log(0.75)) / 2
        assert abs(mean_nll(probs, labels) - expected) < 1e-12
