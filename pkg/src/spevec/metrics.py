"""Cosine scoring and detection metrics (EER, normalized minDCF)."""
from __future__ import annotations

import numpy as np


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_tar = int(labels.sum())
    n_non = labels.size - n_tar
    if n_tar == 0 or n_non == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return scores, labels, n_tar, n_non


def operating_points(scores, labels):
    """(thresholds, FAR, FRR) with accept iff score >= threshold.

    Thresholds run over the distinct scores in increasing order, followed by
    +inf (reject everything). Tied scores share one operating point.
    """
    scores, labels, n_tar, n_non = _split(scores, labels)
    thr, inv = np.unique(scores, return_inverse=True)
    tar_at = np.bincount(inv, weights=labels, minlength=thr.size)
    non_at = np.bincount(inv, weights=~labels, minlength=thr.size)
    # counts strictly below each threshold
    tar_below = np.concatenate([[0.0], np.cumsum(tar_at)])
    non_below = np.concatenate([[0.0], np.cumsum(non_at)])
    frr = tar_below / n_tar
    far = (n_non - non_below) / n_non
    return np.append(thr, np.inf), far, frr


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    FAR falls and FRR rises along the threshold sweep; the EER is taken where
    the two cross, interpolating linearly between the adjacent operating points.
    """
    thr, far, frr = operating_points(scores, labels)
    diff = frr - far
    k = int(np.nonzero(diff >= 0)[0][0])
    if diff[k] == 0 or k == 0:
        return float(far[k]), float(thr[k])
    t = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    hi = thr[k] if np.isfinite(thr[k]) else thr[k - 1]
    return float(eer), float(thr[k - 1] + t * (hi - thr[k - 1]))


def compute_min_dcf(scores, labels, p_target: float = 0.01, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> tuple[float, float]:
    """Normalized minimum detection cost and the threshold achieving it."""
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie in (0, 1)")
    thr, far, frr = operating_points(scores, labels)
    cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    k = int(np.argmin(cost))
    return float(cost[k] / min(c_miss * p_target, c_fa * (1.0 - p_target))), float(thr[k])
