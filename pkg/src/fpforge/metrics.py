"""Operating-point metrics over two score populations.

Both TAR@FAR (verification) and TDR@FDR (spoof detection) reduce to the same
question: given *negative* scores that must rarely reach the threshold and
*positive* scores that should, find the smallest threshold whose negative
pass rate is within the target and report the positive pass rate there.
"""
from __future__ import annotations

import numpy as np

from .errors import MetricError


def candidate_thresholds(negatives: np.ndarray, positives: np.ndarray) -> np.ndarray:
    """Sorted observed scores plus one value just above the largest.

    The pass rates only change at observed scores, so these candidates cover
    every distinct operating point, including "nothing passes".
    """
    allv = np.concatenate([negatives, positives])
    top = np.nextafter(allv.max(), np.inf)
    return np.unique(np.append(allv, top))


def threshold_at_rate(negatives, positives, target: float) -> tuple[float, float]:
    """Return ``(threshold, positive_rate)`` at the smallest threshold with
    ``mean(negatives >= threshold) <= target``."""
    neg = np.sort(np.asarray(negatives, dtype=np.float64))
    pos = np.sort(np.asarray(positives, dtype=np.float64))
    if neg.size == 0 or pos.size == 0:
        raise MetricError("both score populations must be non-empty")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise MetricError("scores must be finite")
    cand = candidate_thresholds(neg, pos)
    neg_rate = (neg.size - np.searchsorted(neg, cand, side="left")) / neg.size
    ok = np.nonzero(neg_rate <= target)[0]
    # the top candidate always passes, since no negative reaches it
    tau = cand[ok[0]]
    pos_rate = (pos.size - np.searchsorted(pos, tau, side="left")) / pos.size
    return float(tau), float(pos_rate)
