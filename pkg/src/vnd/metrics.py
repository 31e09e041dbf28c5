"""Prediction-quality metrics: calibration, OOD separation, set distance.

All functions are pure numpy and order-invariant.  OOD is treated as the
positive class throughout.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a nonempty (n, classes) array")
    if (probs < -1e-9).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must be simplexes")
    return probs


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = _check_probs(probs)
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


def mean_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log predicted probability of the true class."""
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.clip(picked, 1e-12, None)).mean())


def ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins.

    Predictions are binned by their max-class confidence; the ECE is the
    example-weighted mean absolute gap between per-bin accuracy and
    per-bin mean confidence.  Confidence 1.0 falls in the last bin.
    """
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    if len(labels) != probs.shape[0]:
        raise ValueError("labels and probs disagree on the example count")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)
    total = 0.0
    n = len(labels)
    for b in range(n_bins):
        members = bins == b
        count = int(members.sum())
        if count == 0:
            continue
        gap = abs(correct[members].mean() - conf[members].mean())
        total += (count / n) * gap
    return float(total)


def reliability_bins(
    probs: np.ndarray, labels: np.ndarray, n_bins: int = 15
) -> list[tuple[float, float, int]]:
    """Per-bin (mean confidence, accuracy, count) rows for reliability plots."""
    probs = _check_probs(probs)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        members = bins == b
        count = int(members.sum())
        if count == 0:
            rows.append(((b + 0.5) / n_bins, 0.0, 0))
        else:
            rows.append((float(conf[members].mean()), float(correct[members].mean()), count))
    return rows


def ood_scores(probs: np.ndarray, kind: str = "msp") -> np.ndarray:
    """Per-example OOD score; higher means more out-of-distribution.

    kind="msp": 1 - max class probability of the averaged prediction.
    kind="entropy": Shannon entropy of the averaged prediction (nats).
    """
    probs = _check_probs(probs)
    if kind == "msp":
        return 1.0 - probs.max(axis=1)
    if kind == "entropy":
        p = np.clip(probs, 1e-12, None)
        return -(p * np.log(p)).sum(axis=1)
    raise ValueError(f"unknown OOD score kind {kind!r}")


def auroc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic, ties averaged.

    Equals P(score_pos > score_neg) + 0.5 P(score_pos == score_neg).
    """
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def aupr(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Area under the precision-recall curve by step integration.

    Thresholds sweep the distinct scores from high to low; equal scores
    enter together.  AUPR = sum over steps of (recall gain) * precision.
    """
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # Indices where a threshold step ends (last element of each tie group).
    boundary = np.nonzero(np.diff(scores))[0]
    idx = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(labels)[idx]
    fp = np.cumsum(1.0 - labels)[idx]
    precision = tp / (tp + fp)
    recall = tp / pos.size
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


# ---------------------------------------------------------------------------
# Generalized energy distance
# ---------------------------------------------------------------------------


def iou_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - IoU of two binary masks; two empty masks are identical (0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must share a shape")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(a, b).sum()
    return float(1.0 - inter / union)


def ged(samples_a, samples_b) -> float:
    """Generalized energy distance between two sets of binary masks.

    GED^2 = 2 E[d(a, b)] - E[d(a, a')] - E[d(b, b')] with d = 1 - IoU;
    the cross term averages all pairs, the within terms average distinct
    unordered pairs (a singleton set contributes 0).  The squared value
    is clamped at 0 before the square root.
    """
    sa = [np.asarray(m, dtype=bool) for m in samples_a]
    sb = [np.asarray(m, dtype=bool) for m in samples_b]
    if not sa or not sb:
        raise ValueError("both sample sets must be nonempty")
    cross = np.mean([iou_distance(a, b) for a in sa for b in sb])
    within_a = _within(sa)
    within_b = _within(sb)
    sq = 2.0 * cross - within_a - within_b
    return float(np.sqrt(max(sq, 0.0)))


def _within(samples) -> float:
    n = len(samples)
    if n < 2:
        return 0.0
    vals = [
        iou_distance(samples[i], samples[j])
        for i in range(n)
        for j in range(i + 1, n)
    ]
    return float(np.mean(vals))
