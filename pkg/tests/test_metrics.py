"""Validation metrics against hand computations and brute-force oracles."""

from fractions import Fraction

import numpy as np
import pytest

from highway_risk import metrics as mt
from highway_risk.validation import DataError


def brute_force_ap(scores, labels):
    """Independent reference: for every positive, the precision at its tie
    group's boundary in the descending ranking, averaged over positives.
    Precisions are assembled in ranking order (the canonical order) so the
    final mean is bitwise comparable."""
    scores = list(scores)
    labels = list(labels)
    positives = sorted((i for i, l in enumerate(labels) if l == 1),
                       key=lambda i: -scores[i])
    precisions = []
    for i in positives:
        better_or_equal = [j for j in range(len(scores))
                           if scores[j] >= scores[i]]
        tp = sum(1 for j in better_or_equal if labels[j] == 1)
        precisions.append(tp / len(better_or_equal))
    return float(np.mean(np.asarray(precisions)))


class TestNll:
    def test_perfect_predictions(self):
        assert mt.nll([1.0, 0.0], [1, 0]) < 1e-6

    def test_constant_half_is_log_two(self):
        assert mt.nll([0.5] * 4, [1, 0, 1, 0]) == pytest.approx(np.log(2.0))

    def test_hand_batch(self):
        preds = np.array([0.8, 0.3, 0.6])
        labels = np.array([1.0, 0.0, 0.5])
        weights = np.array([1.0, 2.0, 1.0])
        expected = (1.0 * -np.log(0.8)
                    + 2.0 * -np.log(0.7)
                    + 1.0 * -(0.5 * np.log(0.6) + 0.5 * np.log(0.4))) / 4.0
        assert mt.nll(preds, labels, weights) == pytest.approx(expected,
                                                               abs=1e-12)

    def test_unit_weights_match_plain_mean(self):
        r = np.random.default_rng(0)
        preds, labels = r.random(50), r.random(50)
        p = np.clip(preds, mt.LOG_CLAMP, 1 - mt.LOG_CLAMP)
        plain = float(np.mean(-(labels * np.log(p)
                                + (1 - labels) * np.log(1 - p))))
        assert abs(mt.nll(preds, labels) - plain) < 1e-12

    def test_positive_subset(self):
        preds = np.array([0.9, 0.2, 0.4])
        labels = np.array([1.0, 0.0, 0.5])
        expected = (-np.log(0.9) - (0.5 * np.log(0.4) + 0.5 * np.log(0.6))) / 2
        assert mt.nll(preds, labels, subset="positive-risk") == pytest.approx(
            expected)

    def test_empty_positive_subset_rejected(self):
        with pytest.raises(DataError, match="positive"):
            mt.nll([0.5], [0.0], subset="positive-risk")


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert mt.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_hand_case(self):
        ap = mt.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert ap == pytest.approx(0.5 * (1.0 + 2.0 / 3.0), abs=1e-9)

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = rng.integers(2, 40)
            labels = rng.integers(0, 2, n)
            if labels.sum() == 0:
                labels[rng.integers(n)] = 1
            scores = rng.random(n)
            if rng.random() < 0.3:       # force ties in a third of the cases
                scores = np.round(scores, 1)
            assert mt.average_precision(scores, labels) == \
                brute_force_ap(scores, labels)

    def test_matches_reference_library(self):
        from sklearn.metrics import average_precision_score

        rng = np.random.default_rng(2)
        for _ in range(200):
            n = rng.integers(3, 60)
            labels = rng.integers(0, 2, n)
            if labels.sum() == 0:
                labels[rng.integers(n)] = 1
            scores = rng.random(n)
            assert mt.average_precision(scores, labels) == pytest.approx(
                average_precision_score(labels, scores), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[0] = 1
        base = mt.average_precision(scores, labels)
        assert mt.average_precision(np.exp(5 * scores), labels) == base
        assert mt.average_precision(scores ** 3 + 7, labels) == base

    def test_random_scores_match_positive_rate(self):
        rng = np.random.default_rng(4)
        n = 2000
        aps = []
        for _ in range(1000):
            labels = (rng.random(n) < 0.05).astype(int)
            if labels.sum() == 0:
                labels[rng.integers(n)] = 1
            aps.append(mt.average_precision(rng.random(n), labels))
        assert abs(np.mean(aps) - 0.05) < 0.01

    def test_no_positives_rejected(self):
        with pytest.raises(DataError):
            mt.average_precision([0.4, 0.2], [0, 0])

    def test_tie_group_semantics(self):
        # one group of equal scores: precision evaluated at the boundary
        ap = mt.average_precision([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert ap == pytest.approx(0.5)
        assert Fraction(1, 2) == Fraction(2, 4)  # boundary precision 2/4
