import itertools
import math

import numpy as np
import pytest

from midar.geometry import VehicleClass
from midar.labeling import (PredBox, brute_force_assignment_cost,
                            hungarian, iou3d, label_frame)

from conftest import make_box, random_box


def voxel_iou_oracle(a, b, cells=60):
    """Voxel-count IoU over the joint bounding volume.

    Boxes are upright, so the 3D inclusion mask factorizes into a BEV mask
    and a z-interval mask on a product grid; the count is identical to the
    triple loop.
    """
    corners = np.vstack([
        np.hstack([c, [[z_lo], [z_lo], [z_hi], [z_hi]]])
        for box, c, z_lo, z_hi in (
            (a, _corners(a), a.cz - a.height / 2, a.cz + a.height / 2),
            (b, _corners(b), b.cz - b.height / 2, b.cz + b.height / 2))
    ])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    xs = np.linspace(lo[0], hi[0], cells, endpoint=False) \
        + (hi[0] - lo[0]) / (2 * cells)
    ys = np.linspace(lo[1], hi[1], cells, endpoint=False) \
        + (hi[1] - lo[1]) / (2 * cells)
    zs = np.linspace(lo[2], hi[2], cells, endpoint=False) \
        + (hi[2] - lo[2]) / (2 * cells)

    def bev_mask(box):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        gx = xs[:, None] - box.cx
        gy = ys[None, :] - box.cy
        lx = c * gx + s * gy
        ly = -s * gx + c * gy
        return (np.abs(lx) <= box.length / 2) & (np.abs(ly) <= box.width / 2)

    def z_mask(box):
        return np.abs(zs - box.cz) <= box.height / 2

    in_a = bev_mask(a)[:, :, None] & z_mask(a)[None, None, :]
    in_b = bev_mask(b)[:, :, None] & z_mask(b)[None, None, :]
    inter = int((in_a & in_b).sum())
    union = int(in_a.sum()) + int(in_b.sum()) - inter
    return inter / union if union else 0.0


def _corners(box):
    from midar.geometry import box_corners_bev
    return box_corners_bev(box)


class TestIou3d:
    def test_identical_boxes(self):
        box = make_box(yaw=0.3)
        assert iou3d(box, box) == 1.0

    def test_axis_aligned_shift_is_one_third(self):
        a = make_box("a", x=0, y=0, z=0, w=2, l=2, h=2)
        b = make_box("b", x=1, y=0, z=0, w=2, l=2, h=2)
        assert math.isclose(iou3d(a, b), 1.0 / 3.0, rel_tol=1e-12)

    def test_symmetry(self, rng):
        for i in range(50):
            a = random_box(rng, "a", span=3.0)
            b = random_box(rng, "b", span=3.0)
            assert abs(iou3d(a, b) - iou3d(b, a)) < 1e-9

    def test_disjoint_footprints(self):
        a = make_box("a", x=0, y=0)
        b = make_box("b", x=30, y=0)
        assert iou3d(a, b) == 0.0

    def test_disjoint_vertical_intervals(self):
        a = make_box("a", z=0.0, h=1.0)
        b = make_box("b", z=5.0, h=1.0)
        assert iou3d(a, b) == 0.0

    def test_requires_positive_height(self):
        with pytest.raises(ValueError):
            iou3d(make_box("a", h=0.0), make_box("b"))

    def test_matches_voxel_oracle(self, rng):
        for i in range(20):
            a = random_box(rng, "a", span=2.0)
            b = random_box(rng, "b", span=2.0)
            assert abs(iou3d(a, b) - voxel_iou_oracle(a, b, cells=100)) < 0.02


class TestHungarian:
    def test_identity_favoring_matrix(self):
        cost = np.ones((3, 3)) - np.eye(3)
        assert hungarian(cost) == [(0, 0), (1, 1), (2, 2)]

    def test_three_by_three_example(self):
        cost = np.array([[1.0, 2, 3], [2, 4, 6], [3, 6, 9]])
        pairs = hungarian(cost)
        assert pairs == [(0, 2), (1, 1), (2, 0)]
        assert sum(cost[r, c] for r, c in pairs) == 10

    def test_matches_brute_force(self, rng):
        for _ in range(200):
            m = int(rng.integers(1, 8))
            k = int(rng.integers(1, 8))
            cost = rng.normal(size=(m, k)) * 10
            pairs = hungarian(cost)
            assert len(pairs) == min(m, k)
            assert len({r for r, _ in pairs}) == len(pairs)
            assert len({c for _, c in pairs}) == len(pairs)
            got = sum(cost[r, c] for r, c in pairs)
            want = brute_force_assignment_cost(cost)
            assert abs(got - want) < 1e-9 * (1 + abs(want))

    def test_tie_break_is_lexicographically_smallest(self):
        # Every assignment of a constant matrix is optimal.
        assert hungarian(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
        assert hungarian(np.zeros((2, 4))) == [(0, 0), (1, 1)]
        assert hungarian(np.zeros((4, 2))) == [(0, 0), (1, 1)]

    def test_tie_break_exhaustive(self, rng):
        # Against all optimal assignments enumerated by brute force.
        for _ in range(50):
            m, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
            cost = rng.integers(0, 3, size=(m, k)).astype(float)
            got = hungarian(cost)
            best = brute_force_assignment_cost(cost)
            optima = []
            if m <= k:
                for perm in itertools.permutations(range(k), m):
                    pairs = list(enumerate(perm))
                    if abs(sum(cost[r, c] for r, c in pairs) - best) < 1e-12:
                        optima.append(pairs)
            else:
                for perm in itertools.permutations(range(m), k):
                    pairs = sorted((r, c) for c, r in enumerate(perm))
                    if abs(sum(cost[r, c] for r, c in pairs) - best) < 1e-12:
                        optima.append(pairs)
            assert got == min(optima)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 1.0], [1.0, 2.0]]))

    def test_empty(self):
        assert hungarian(np.zeros((0, 3))) == []


class TestLabelFrame:
    def test_good_match_is_tp(self):
        gt = [make_box("g1", x=0, y=0)]
        preds = [PredBox(make_box("p1", x=0.05, y=0), score=0.9)]
        result = label_frame(gt, preds)
        assert result.labels == {"g1": 0}
        assert result.fp_ids == []

    def test_low_score_pred_dropped(self):
        gt = [make_box("g1", x=0, y=0)]
        preds = [PredBox(make_box("p1", x=0.0, y=0), score=0.3)]
        result = label_frame(gt, preds)
        assert result.labels == {"g1": 1}
        assert result.fp_ids == []

    def test_weak_overlap_rejected_as_match(self):
        # IoU 0.6 for cars fails the 0.7 gate: GT -> FN, pred -> FP.
        gt = [make_box("g1", x=0, y=0, z=0, w=2, l=2, h=2)]
        shift = 2 * (1 - 0.6) / (1 + 0.6)  # axis shift giving IoU 0.6
        preds = [PredBox(make_box("p1", x=shift, y=0, z=0, w=2, l=2, h=2),
                         score=0.9)]
        iou = iou3d(gt[0], preds[0].box)
        assert math.isclose(iou, 0.6, rel_tol=1e-12)
        result = label_frame(gt, preds)
        assert result.labels == {"g1": 1}
        assert result.fp_ids == ["p1"]

    def test_exact_threshold_rejected(self):
        # Dyadic geometry: IoU is exactly 0.5, equality must reject.
        gt = [make_box("g1", x=0, y=0, z=0, w=2, l=3, h=2,
                       cls=VehicleClass.TRUCK)]
        preds = [PredBox(make_box("p1", x=1.0, y=0, z=0, w=2, l=3, h=2,
                                  cls=VehicleClass.TRUCK), score=0.9)]
        assert iou3d(gt[0], preds[0].box) == 0.5
        result = label_frame(gt, preds)
        assert result.labels == {"g1": 1}

    def test_cross_class_never_matches(self):
        gt = [make_box("g1", x=0, y=0, cls=VehicleClass.CAR)]
        preds = [PredBox(make_box("p1", x=0, y=0, cls=VehicleClass.TRUCK),
                         score=0.9)]
        result = label_frame(gt, preds)
        assert result.labels == {"g1": 1}
        assert result.fp_ids == ["p1"]

    def test_score_threshold_boundary_kept(self):
        gt = [make_box("g1", x=0, y=0)]
        preds = [PredBox(make_box("p1", x=0, y=0), score=0.4)]
        assert label_frame(gt, preds).labels == {"g1": 0}

    def test_count_identities_fuzz(self, rng):
        for trial in range(30):
            n_gt = int(rng.integers(0, 8))
            n_pred = int(rng.integers(0, 8))
            gt = [random_box(rng, f"g{i}", span=12.0) for i in range(n_gt)]
            preds = [PredBox(random_box(rng, f"p{i}", span=12.0),
                             score=float(rng.uniform(0, 1)))
                     for i in range(n_pred)]
            result = label_frame(gt, preds)
            assert set(result.labels) == {b.id for b in gt}
            n_tp = sum(1 for v in result.labels.values() if v == 0)
            n_fn = sum(1 for v in result.labels.values() if v == 1)
            assert n_tp + n_fn == n_gt
            n_kept = sum(1 for p in preds if p.score >= 0.4)
            assert n_tp + len(result.fp_ids) == n_kept

    def test_pred_matched_at_most_once(self, rng):
        gt = [make_box("g1", x=0, y=0), make_box("g2", x=0.3, y=0)]
        preds = [PredBox(make_box("p1", x=0.1, y=0), score=0.9)]
        result = label_frame(gt, preds)
        assert sorted(result.labels.values()) == [0, 1]

    def test_score_validation(self):
        with pytest.raises(ValueError):
            PredBox(make_box("p"), score=1.5)
