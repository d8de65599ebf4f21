"""Ranking and calibration metrics.

AUC is the Mann-Whitney statistic with half credit for ties, computed from
midranks.  ``soft_auc`` extends it to fractional labels (each row counts as
positive with mass ``p`` and negative with mass ``1 - p``), which is how a
model's ranking is scored against a simulator's hidden relevance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .training import LOSS_CLAMP

__all__ = ["EvalReport", "auc", "ece", "evaluate", "normalized_entropy",
           "oe_ratio", "soft_auc"]


def _pair(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != len(y):
        raise ValueError("auc needs binary labels with both classes present")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def soft_auc(scores, truth) -> float:
    """AUC against fractional labels in ``[0, 1]``.

    Equals ``sum_{i != j} p_i (1 - p_j) [s_i > s_j or 1/2 if tied]`` divided by
    ``sum_{i != j} p_i (1 - p_j)``.  For 0/1 labels this is :func:`auc`.
    """
    s, p = _pair(scores, truth)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("soft labels must lie in [0, 1]")
    q = 1.0 - p
    order = np.argsort(s, kind="stable")
    s, p, q = s[order], p[order], q[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pg = np.add.reduceat(p, starts)
    qg = np.add.reduceat(q, starts)
    neg_below = np.cumsum(qg) - qg
    num = float(np.sum(pg * neg_below) + 0.5 * np.sum(pg * qg) - 0.5 * np.sum(p * q))
    den = float(p.sum() * q.sum() - np.sum(p * q))
    if den <= 0:
        raise ValueError("soft labels carry no positive/negative contrast")
    return num / den


def _bce(preds, labels):
    p = np.clip(np.asarray(preds, dtype=float), LOSS_CLAMP, 1 - LOSS_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


def normalized_entropy(preds, labels) -> float:
    """Cross-entropy of ``preds`` over that of the constant base-rate predictor."""
    p, y = _pair(preds, labels)
    base = y.mean()
    if not 0 < base < 1:
        raise ValueError("normalized entropy is undefined for a single-class label set")
    ref = -(base * math.log(base) + (1 - base) * math.log1p(-base))
    return _bce(p, y) / ref


def ece(preds, labels, num_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on ``[0, 1]``.

    Bin ``k`` holds ``[k/B, (k+1)/B)``; a prediction of exactly 1 goes to the
    last bin.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    p, y = _pair(preds, labels)
    if p.size == 0:
        return 0.0
    bins = np.minimum((p * num_bins).astype(np.int64), num_bins - 1)
    count = np.bincount(bins, minlength=num_bins)
    gap = np.abs(np.bincount(bins, p, num_bins) - np.bincount(bins, y, num_bins))
    # |mean_pred - mean_label| * count / n == |sum_pred - sum_label| / n
    return float(gap[count > 0].sum() / p.size)


def oe_ratio(preds, labels, group_ids) -> dict:
    """Observed over expected positives for each group.

    Groups whose predictions sum to zero map to ``nan``.
    """
    p, y = _pair(preds, labels)
    g = np.asarray(group_ids).astype(str)
    out = {}
    for key in sorted(set(g.tolist()), key=_natural):
        rows = g == key
        expected = float(p[rows].sum())
        out[key] = float(y[rows].sum()) / expected if expected > 0 else float("nan")
    return out


def _natural(key):
    return (0, int(key), "") if key.lstrip("-").isdigit() else (1, 0, key)


@dataclass
class EvalReport:
    auc: float | None
    normalized_entropy: float | None
    ece: float
    oe_by_group: dict = field(default_factory=dict)
    count: int = 0
    positives: int = 0
    relevance_auc: float | None = None

    def to_dict(self) -> dict:
        d = {
            "auc": self.auc,
            "normalized_entropy": self.normalized_entropy,
            "ece": self.ece,
            "oe_by_group": self.oe_by_group,
            "count": self.count,
            "positives": self.positives,
        }
        if self.relevance_auc is not None:
            d["relevance_auc"] = self.relevance_auc
        return d


def evaluate(preds, labels, groups=None, truth=None, num_bins: int = 10) -> EvalReport:
    """Bundle every metric; single-class label sets leave AUC and NE as ``None``."""
    p, y = _pair(preds, labels)
    both = 0 < y.sum() < len(y)
    rel = None
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        if not np.any(np.isnan(truth)):
            rel = soft_auc(p, truth)
    return EvalReport(
        auc=auc(p, y) if both else None,
        normalized_entropy=normalized_entropy(p, y) if both else None,
        ece=ece(p, y, num_bins),
        oe_by_group=oe_ratio(p, y, groups) if groups is not None else {},
        count=int(len(y)),
        positives=int(y.sum()),
        relevance_auc=rel,
    )
