"""Rank-based ROC statistics."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy.stats import rankdata


def _as_arrays(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores and labels must be 1-D of equal length, got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("both classes required to compute AUC")
    return s, y.astype(bool)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact ROC-AUC as the Mann-Whitney statistic.

    Equals the fraction of (abnormal, normal) pairs in which the abnormal
    item scores higher, with ties counted as one half. Label 1 is the
    positive (abnormal) class.
    """
    s, pos = _as_arrays(scores, labels)
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    # average ranks are half-integers, so the rank sum is exact in float64
    u = rankdata(s, method="average")[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """ROC vertices ``(fpr, tpr, threshold)``, thresholds descending.

    The first vertex is ``(0, 0, inf)``; each following vertex classifies
    ``score >= threshold`` as abnormal.
    """
    s, pos = _as_arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    tps = np.cumsum(pos)
    fps = np.cumsum(~pos)
    last = np.r_[np.diff(s) != 0, True]
    points = [(0.0, 0.0, float("inf"))]
    for i in np.flatnonzero(last):
        points.append((fps[i] / fps[-1], tps[i] / tps[-1], float(s[i])))
    return [(float(f), float(t), th) for f, t, th in points]
