"""Evaluation utilities: ROC-AUC, thresholded classification metrics,
Welch's t-test, and dropout-table extraction from labeled runs.

Throughout, FN is the positive class (label 1), matching the TP(0)/FN(1)
label encoding used by the labeling pipeline.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .baselines import DropoutTable
from .errors import NumericError


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative,
    ties counted 1/2 (equals trapezoidal ROC integration)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericError("roc_auc requires both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - 0.5 * n_pos * (n_pos + 1)
    return float(u / (n_pos * n_neg))


def classification_metrics(scores: Sequence[float], labels: Sequence[int],
                           threshold: float) -> dict[str, float]:
    """Precision/recall/accuracy/F1 at a threshold; 0/0 conventions map
    to 0. A sample is predicted positive when score >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    accuracy = (tp + tn) / len(labels) if len(labels) else 0.0
    return {"precision": precision, "recall": recall,
            "accuracy": accuracy, "f1": f1}


def _t_survival(t: float, df: float) -> float:
    """P(T > t) for Student's t via the regularized incomplete beta."""
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(0.5 * df, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float],
            one_tailed: bool) -> dict[str, float]:
    """Welch's unequal-variance t-test.

    One-tailed tests H1: mean(a) > mean(b); the two-tailed p doubles the
    smaller tail. Degrees of freedom follow Welch-Satterthwaite.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise NumericError("welch_t requires at least 2 samples per group")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        raise NumericError("welch_t: both samples have zero variance")
    sa = var_a / len(a)
    sb = var_b / len(b)
    t = float((a.mean() - b.mean()) / math.sqrt(sa + sb))
    df = (sa + sb) ** 2 / (sa ** 2 / (len(a) - 1) + sb ** 2 / (len(b) - 1))
    p_one = _t_survival(t, df)
    p = p_one if one_tailed else 2.0 * min(p_one, 1.0 - p_one)
    return {"t": t, "df": float(df), "p": float(p)}


def extract_dropout_table(samples: Iterable[tuple[float, int]],
                          bounds: Sequence[float]) -> DropoutTable:
    """Empirical FN rate per distance bucket from (distance, label) pairs,
    label 1 meaning FN. Every bucket must be populated."""
    bounds = tuple(float(b) for b in bounds)
    counts = np.zeros(len(bounds), dtype=np.int64)
    misses = np.zeros(len(bounds), dtype=np.int64)
    for dist, label in samples:
        idx = len(bounds) - 1
        for i, bound in enumerate(bounds):
            if dist <= bound:
                idx = i
                break
        counts[idx] += 1
        misses[idx] += int(label)
    for i, c in enumerate(counts):
        if c == 0:
            lo = 0.0 if i == 0 else bounds[i - 1]
            raise NumericError(
                f"dropout bucket ({lo}, {bounds[i]}] has no samples")
    return DropoutTable(bounds, tuple(misses / counts))
