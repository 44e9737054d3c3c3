"""Validation metrics: weighted negative log likelihood and average precision."""

import numpy as np

from .validation import DataError

LOG_CLAMP = 1e-7


def nll(preds, labels, weights=None, subset="all"):
    """Weighted mean cross-entropy of predictions against labels in [0, 1].

    subset='positive-risk' restricts to samples whose label exceeds zero.
    """
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    weights = np.ones_like(preds) if weights is None else np.asarray(weights, float)
    if not (preds.shape == labels.shape == weights.shape):
        raise ValueError("preds, labels, and weights must have matching lengths")
    if subset == "positive-risk":
        mask = labels > 0
        if not mask.any():
            raise DataError("positive-risk subset is empty")
        preds, labels, weights = preds[mask], labels[mask], weights[mask]
    elif subset != "all":
        raise ValueError(f"unknown subset '{subset}'")
    p = np.clip(preds, LOG_CLAMP, 1.0 - LOG_CLAMP)
    xent = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(np.sum(weights * xent) / np.sum(weights))


def average_precision(scores, labels):
    """Area-like summary of the precision-recall curve over a descending-score
    ranking.

    Tied scores form one group and precision is evaluated at the group
    boundary, so the result is invariant to the input order of ties. Equals
    the mean, over positive samples, of the precision at their group
    boundary. Raises when no positive labels are present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have matching lengths")
    positives = int(np.sum(labels == 1))
    if positives == 0:
        raise DataError("average precision undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = np.asarray(labels)[order]

    precisions = []
    tp = fp = 0
    i = 0
    n = len(sorted_scores)
    while i < n:
        j = i
        group_tp = 0
        while j < n and sorted_scores[j] == sorted_scores[i]:
            if sorted_labels[j] == 1:
                group_tp += 1
            j += 1
        tp += group_tp
        fp += (j - i) - group_tp
        precision = tp / (tp + fp)
        precisions.extend([precision] * group_tp)
        i = j
    return float(np.mean(precisions))
