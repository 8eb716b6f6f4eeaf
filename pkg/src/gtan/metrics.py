"""Ranking and thresholded classification metrics for binary fraud labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney statistic; tied scores count one half."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of (R_i - R_{i-1}) P_i over descending distinct score thresholds."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` with positives predicted at ``score >= threshold``."""
    s, y = _prep(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp, fp, fn, tn


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def f1_macro(scores, labels, threshold: float = 0.5) -> float:
    """Unweighted mean of the fraud-class and legitimate-class F1."""
    s, _ = _prep(scores, labels)
    if len(s) == 0:
        raise UndefinedMetricError("F1 needs at least one instance")
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    # legitimate class: roles of tp/tn and fp/fn swap
    return (_f1(tp, fp, fn) + _f1(tn, fn, fp)) / 2.0


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    f1_macro: float
    ap: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, threshold: float = 0.5) -> MetricsReport:
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    return MetricsReport(
        auc=auc(scores, labels),
        f1_macro=f1_macro(scores, labels, threshold),
        ap=average_precision(scores, labels),
        tp=tp, fp=fp, fn=fn, tn=tn,
        n_evaluated=tp + fp + fn + tn,
    )
