"""Detection metrics: equal error rate and minimum detection cost."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _split(scores, labels) -> tuple:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_tgt = int(labels.sum())
    n_non = labels.size - n_tgt
    if n_tgt == 0 or n_non == 0:
        raise MetricError("need at least one target and one non-target trial")
    return scores, labels, n_tgt, n_non


def operating_points(scores, labels) -> tuple:
    """Miss and false-alarm rates as the accept threshold sweeps from +inf down.

    Trials with score >= threshold are accepted.  Point 0 is the
    reject-everything threshold; each following point lowers the threshold
    to the next distinct score value, the last one accepts everything.
    """
    scores, labels, n_tgt, n_non = _split(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tgt_acc = np.cumsum(lab)[last_of_group]
    non_acc = np.cumsum(~lab)[last_of_group]
    p_miss = np.r_[n_tgt, n_tgt - tgt_acc] / n_tgt
    p_fa = np.r_[0, non_acc] / n_non
    return p_miss, p_fa


def compute_eer(scores, labels) -> float:
    """Rate where miss and false-alarm curves cross, linearly interpolated."""
    p_miss, p_fa = operating_points(scores, labels)
    i = int(np.argmax(p_miss <= p_fa))  # first point at or past the crossing
    if i == 0:
        return float(p_miss[0])
    m0, m1 = p_miss[i - 1], p_miss[i]
    f0, f1 = p_fa[i - 1], p_fa[i]
    t = (m0 - f0) / ((m0 - f0) - (m1 - f1))
    return float(m0 + t * (m1 - m0))


def compute_min_dcf(scores, labels, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalised detection cost over all thresholds."""
    p_miss, p_fa = operating_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))
