"""Label generation: match ground-truth boxes to detector predictions.

Per frame: predictions below the score gate are dropped, boxes are grouped
by class, a negative-IoU cost matrix per class is solved with a Hungarian
assignment, and matches survive only above a class-specific IoU threshold.
Matched ground truth becomes TP (0), unmatched FN (1); leftover kept
predictions are FPs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import OrientedBox, VehicleClass, box_corners_bev

DEFAULT_IOU_THRESHOLDS = {
    VehicleClass.CAR: 0.7,
    VehicleClass.TRUCK: 0.5,
    VehicleClass.BUS: 0.5,
    VehicleClass.TRAILER: 0.5,
    VehicleClass.CONSTRUCTION_VEHICLE: 0.5,
    VehicleClass.OTHER: 0.5,
}


@dataclass(frozen=True)
class PredBox:
    box: OrientedBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class MatchConfig:
    score_threshold: float = 0.4
    iou_thresholds: dict[VehicleClass, float] = field(
        default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))

    def __post_init__(self):
        if not (0.0 < self.score_threshold < 1.0):
            raise ValueError("score_threshold must lie in (0, 1)")
        for cls, t in self.iou_thresholds.items():
            if not (0.0 < t < 1.0):
                raise ValueError(f"iou threshold for {cls}: {t}")


@dataclass
class FrameLabels:
    """Per ground-truth box: 0 (TP) or 1 (FN); plus unmatched FP pred ids."""

    labels: dict[str, int]
    fp_ids: list[str]


def iou3d(a: OrientedBox, b: OrientedBox) -> float:
    """3D IoU: BEV polygon overlap times vertical interval overlap, over
    the union volume. Symmetric in its arguments."""
    for box in (a, b):
        if box.height <= 0:
            raise ValueError(f"box {box.id!r}: iou3d requires height > 0")
    area = kernels.rect_intersection_area(box_corners_bev(a),
                                          box_corners_bev(b))
    z_lo = max(a.cz - 0.5 * a.height, b.cz - 0.5 * b.height)
    z_hi = min(a.cz + 0.5 * a.height, b.cz + 0.5 * b.height)
    inter = area * max(0.0, z_hi - z_lo)
    vol_a = a.width * a.length * a.height
    vol_b = b.width * b.length * b.height
    return inter / (vol_a + vol_b - inter)


# -- Hungarian assignment ----------------------------------------------------


def _assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost of a size-min(m,k) assignment.

    Classic potentials-and-augmenting-paths solver on the matrix padded to
    square with zeros. Dummy rows (or columns) appear on one side only, so
    every perfect matching routes them at zero cost and the padded optimum
    equals the rectangular optimum.
    """
    m, k = cost.shape
    n = max(m, k)
    a = np.zeros((n, n))
    a[:m, :k] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row of column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = sum(a[match[j] - 1, j - 1] for j in range(1, n + 1))
    return float(total)


def hungarian(cost) -> list[tuple[int, int]]:
    """Globally optimal min-cost one-to-one assignment of size min(m, k).

    Returns (row, col) pairs sorted by row. Among equally optimal
    assignments the lexicographically smallest pair sequence is chosen, so
    labeling is reproducible across platforms.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must contain finite entries")

    m, k = cost.shape
    size = min(m, k)
    best = _assignment_cost(cost)
    tol = 1e-9 * (1.0 + abs(best))

    pairs: list[tuple[int, int]] = []
    rows_left = list(range(m))
    cols_left = list(range(k))
    fixed = 0.0
    while len(pairs) < size:
        r = rows_left[0]
        rest_rows = rows_left[1:]
        committed = False
        for c in cols_left:
            rest_cols = [x for x in cols_left if x != c]
            need = size - len(pairs) - 1
            if need > 0:
                if min(len(rest_rows), len(rest_cols)) < need:
                    continue
                sub = _assignment_cost(cost[np.ix_(rest_rows, rest_cols)])
            else:
                sub = 0.0
            if fixed + cost[r, c] + sub <= best + tol:
                pairs.append((r, c))
                fixed += cost[r, c]
                cols_left = rest_cols
                committed = True
                break
        if not committed:
            # Optimality requires leaving this row unmatched (only possible
            # when there are more rows than columns).
            sub = _assignment_cost(cost[np.ix_(rest_rows, cols_left)])
            assert fixed + sub <= best + tol, "assignment refinement failed"
        rows_left = rest_rows
    return pairs


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Exhaustive minimum assignment cost; oracle for small instances."""
    cost = np.asarray(cost, dtype=np.float64)
    m, k = cost.shape
    if m <= k:
        perms = np.array(list(itertools.permutations(range(k), m)))
        rows = np.arange(m)
        return float(cost[rows, perms].sum(axis=1).min())
    perms = np.array(list(itertools.permutations(range(m), k)))
    cols = np.arange(k)
    return float(cost[perms, cols].sum(axis=1).min())


def label_frame(gt: Sequence[OrientedBox], preds: Sequence[PredBox],
                cfg: MatchConfig | None = None) -> FrameLabels:
    """Label each ground-truth box TP/FN against the kept predictions.

    Matching never crosses classes, and a match is valid only when its IoU
    strictly exceeds the class threshold.
    """
    if cfg is None:
        cfg = MatchConfig()
    kept = [p for p in preds if p.score >= cfg.score_threshold]

    labels: dict[str, int] = {}
    fp_ids: list[str] = []
    classes = {b.cls for b in gt} | {p.box.cls for p in kept}
    for cls in sorted(classes, key=lambda c: c.value):
        gt_cls = [b for b in gt if b.cls == cls]
        pred_cls = [p for p in kept if p.box.cls == cls]
        if not gt_cls:
            fp_ids.extend(p.box.id for p in pred_cls)
            continue
        if not pred_cls:
            for b in gt_cls:
                labels[b.id] = 1
            continue
        iou = np.array([[iou3d(g, p.box) for p in pred_cls] for g in gt_cls])
        matched_preds = set()
        threshold = cfg.iou_thresholds.get(cls,
                                           DEFAULT_IOU_THRESHOLDS[cls])
        for gi, pi in hungarian(-iou):
            if iou[gi, pi] > threshold:
                labels[gt_cls[gi].id] = 0
                matched_preds.add(pi)
        for b in gt_cls:
            labels.setdefault(b.id, 1)
        fp_ids.extend(p.box.id for i, p in enumerate(pred_cls)
                      if i not in matched_preds)
    return FrameLabels(labels=labels, fp_ids=fp_ids)
