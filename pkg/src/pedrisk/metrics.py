"""Evaluation math: AUROC, bootstrap CIs, split-conformal intervals, net benefit."""
from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateResampling,
    SingleClass,
    TooFewCalibrationPoints,
)


def auroc(scores, labels) -> float:
    """Pairwise concordance probability with ties counted 1/2.

    Rank-based O(n log n) computation; exactly equal to the brute-force
    pairwise count because averaged ranks are exact in float64 at these sizes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positives of {labels.size}")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(metric_fn, scores, labels, reps: int = 100, seed: int = 0):
    """Percentile 2.5/97.5 bounds over resamples-with-replacement.

    Single-class resamples are redrawn up to 10 times, then skipped; more
    than half the replicates skipped raises DegenerateResampling.
    """
    if reps <= 0:
        raise ValueError(f"reps must be positive, got {reps}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n = scores.size
    if n < 10:
        raise DegenerateResampling(f"need at least 10 points, got {n}")
    rng = np.random.default_rng(seed)
    values = []
    skipped = 0
    for _ in range(reps):
        for _ in range(10):
            idx = rng.integers(0, n, size=n)
            resampled = labels[idx]
            if resampled.any() and not resampled.all():
                values.append(metric_fn(scores[idx], resampled))
                break
        else:
            skipped += 1
    if skipped > reps // 2:
        raise DegenerateResampling(f"{skipped} of {reps} replicates were single-class")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


def conformal_interval(calibration_residuals, alpha: float) -> float:
    """Split-conformal half-width: the k-th smallest absolute residual,
    k = ceil((n+1)(1-alpha)). k > n means the interval is infinite, which is
    signaled as TooFewCalibrationPoints."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    residuals = np.abs(np.asarray(calibration_residuals, dtype=np.float64))
    n = residuals.size
    k = int(np.ceil((n + 1) * (1.0 - alpha)))
    if k > n:
        raise TooFewCalibrationPoints(
            f"need k={k} residuals for alpha={alpha}, have {n} (infinite width)")
    return float(np.sort(residuals)[k - 1])


def net_benefit(scores, labels, threshold_pt: float) -> float:
    """Decision-curve net benefit TP/N - (FP/N) * pt/(1-pt) at threshold pt."""
    if not 0.0 < threshold_pt < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold_pt}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n = scores.size
    called = scores >= threshold_pt
    tp = int(np.sum(called & labels))
    fp = int(np.sum(called & ~labels))
    return tp / n - (fp / n) * (threshold_pt / (1.0 - threshold_pt))
