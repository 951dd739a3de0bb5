"""Ranking and classification metrics used by the evaluation harness.

Averages use ``math.fsum`` so a result does not depend on summation order
(for instance on how tied scores happen to be sorted).
"""

from __future__ import annotations

import math

import numpy as np


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def average_precision(relevant, scores) -> float:
    """One-vs-rest average precision.

    Items with equal scores share a threshold: each positive contributes the
    precision over every item scoring at least as high as it does.
    """
    t = np.asarray(relevant, dtype=bool)
    s = np.asarray(scores, dtype=float)
    if t.shape != s.shape or t.ndim != 1:
        raise ValueError("relevance and scores must be equal-length vectors")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t)
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    precision = tp[ends] / (ends + 1)
    pos_in_group = tp[ends] - np.r_[0, tp[ends[:-1]]]
    return math.fsum(np.repeat(precision, pos_in_group).tolist()) / n_pos


def per_class_average_precision(y_true, probs, classes) -> dict:
    y_true = np.asarray(y_true)
    out = {}
    for c in classes:
        rel = y_true == c
        if rel.any():
            out[int(c)] = average_precision(rel, probs[:, c])
    return out


def mean_average_precision(y_true, probs, classes) -> float:
    ap = per_class_average_precision(y_true, probs, classes)
    if not ap:
        raise ValueError("no class has a positive example")
    return _mean(ap.values())


def per_class_recall(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return {int(c): int(np.sum(y_pred[y_true == c] == c)) / int(np.sum(y_true == c)) for c in np.unique(y_true)}


def balanced_accuracy(y_true, y_pred) -> float:
    rec = per_class_recall(y_true, y_pred)
    if not rec:
        raise ValueError("empty label set")
    return _mean(rec.values())


def precision_for_class(y_true, y_pred, c: int) -> float:
    picked = np.asarray(y_pred) == c
    if not picked.any():
        return 0.0
    return float(np.mean(np.asarray(y_true)[picked] == c))
