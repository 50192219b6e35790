"""Hot numeric kernels: segment-vs-box hit tests and convex rectangle clipping.

Two interchangeable backends:

* ``numba`` (default) - scalar loops compiled with ``@njit(cache=True)``.
* ``numpy`` - vectorized fallback, selected by setting the environment
  variable ``MIDAR_NUMBA=0`` (or automatically when numba is unavailable).

Both backends use identical comparisons, so results match exactly; the
test suite asserts parity and ``benchmarks/bench_kernels.py`` compares
their throughput.

Box packing convention: a BEV box row is
``(cx, cy, cos(yaw), sin(yaw), half_length, half_width)``.
All hit tests are closed-set: boundary contact counts as intersection.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_requested() -> bool:
    return os.environ.get("MIDAR_NUMBA", "1") != "0"


_HAVE_NUMBA = False
if _numba_requested():
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def pack_boxes(cx, cy, yaw, length, width) -> np.ndarray:
    """Pack per-box parameters into the (n, 6) layout the kernels consume."""
    cx = np.asarray(cx, dtype=np.float64)
    out = np.empty((cx.shape[0], 6), dtype=np.float64)
    out[:, 0] = cx
    out[:, 1] = np.asarray(cy, dtype=np.float64)
    out[:, 2] = np.cos(np.asarray(yaw, dtype=np.float64))
    out[:, 3] = np.sin(np.asarray(yaw, dtype=np.float64))
    out[:, 4] = np.asarray(length, dtype=np.float64) * 0.5
    out[:, 5] = np.asarray(width, dtype=np.float64) * 0.5
    return out


# -- scalar cores (numba-compilable) ----------------------------------------


def _seg_hits_box_scalar(ax, ay, bx, by, cx, cy, co, si, hl, hw):
    # Endpoints in the box frame, then Liang-Barsky against the closed
    # AABB |x| <= hl, |y| <= hw. A segment fully inside keeps t0 <= t1.
    dx = ax - cx
    dy = ay - cy
    x0 = co * dx + si * dy
    y0 = -si * dx + co * dy
    dx = bx - cx
    dy = by - cy
    x1 = co * dx + si * dy
    y1 = -si * dx + co * dy

    t0 = 0.0
    t1 = 1.0

    p = x1 - x0
    if p == 0.0:
        if x0 < -hl or x0 > hl:
            return False
    else:
        ta = (-hl - x0) / p
        tb = (hl - x0) / p
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False

    p = y1 - y0
    if p == 0.0:
        if y0 < -hw or y0 > hw:
            return False
    else:
        ta = (-hw - y0) / p
        tb = (hw - y0) / p
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb

    return t0 <= t1


def _seg_hits_many_loop(ax, ay, bx, by, boxes, out):
    for i in range(boxes.shape[0]):
        out[i] = _seg_hits_box_scalar(
            ax, ay, bx, by,
            boxes[i, 0], boxes[i, 1], boxes[i, 2],
            boxes[i, 3], boxes[i, 4], boxes[i, 5],
        )


def _occlusion_matrix_loop(txs, tys, boxes, out):
    for j in range(txs.shape[0]):
        for i in range(boxes.shape[0]):
            out[j, i] = _seg_hits_box_scalar(
                0.0, 0.0, txs[j], tys[j],
                boxes[i, 0], boxes[i, 1], boxes[i, 2],
                boxes[i, 3], boxes[i, 4], boxes[i, 5],
            )


def _clip_area_scalar(subject, clipper):
    # Sutherland-Hodgman: clip the subject quad by each CCW clipper edge.
    # A quad clipped by four half-planes has at most 8 vertices.
    cur = np.empty((16, 2))
    nxt = np.empty((16, 2))
    n_cur = 4
    for i in range(4):
        cur[i, 0] = subject[i, 0]
        cur[i, 1] = subject[i, 1]

    for e in range(4):
        ex = clipper[e, 0]
        ey = clipper[e, 1]
        fx = clipper[(e + 1) % 4, 0]
        fy = clipper[(e + 1) % 4, 1]
        ux = fx - ex
        uy = fy - ey
        n_nxt = 0
        for i in range(n_cur):
            px = cur[i, 0]
            py = cur[i, 1]
            qx = cur[(i + 1) % n_cur, 0]
            qy = cur[(i + 1) % n_cur, 1]
            sp = ux * (py - ey) - uy * (px - ex)
            sq = ux * (qy - ey) - uy * (qx - ex)
            q_in = sq >= 0.0
            p_in = sp >= 0.0
            if q_in:
                if not p_in:
                    t = sp / (sp - sq)
                    nxt[n_nxt, 0] = px + t * (qx - px)
                    nxt[n_nxt, 1] = py + t * (qy - py)
                    n_nxt += 1
                nxt[n_nxt, 0] = qx
                nxt[n_nxt, 1] = qy
                n_nxt += 1
            elif p_in:
                t = sp / (sp - sq)
                nxt[n_nxt, 0] = px + t * (qx - px)
                nxt[n_nxt, 1] = py + t * (qy - py)
                n_nxt += 1
        if n_nxt == 0:
            return 0.0
        for i in range(n_nxt):
            cur[i, 0] = nxt[i, 0]
            cur[i, 1] = nxt[i, 1]
        n_cur = n_nxt

    area = 0.0
    for i in range(n_cur):
        j = (i + 1) % n_cur
        area += cur[i, 0] * cur[j, 1] - cur[j, 0] * cur[i, 1]
    return abs(area) * 0.5


if _HAVE_NUMBA:
    _seg_hits_box_scalar = njit(cache=True)(_seg_hits_box_scalar)
    _seg_hits_many_loop = njit(cache=True)(_seg_hits_many_loop)
    _occlusion_matrix_loop = njit(cache=True)(_occlusion_matrix_loop)
    _clip_area_scalar = njit(cache=True)(_clip_area_scalar)


# -- numpy fallback ----------------------------------------------------------


def _clip_params_np(x0, y0, x1, y1, hl, hw):
    t0 = np.zeros(np.broadcast(x0, x1).shape)
    t1 = np.ones_like(t0)
    ok = np.ones_like(t0, dtype=bool)
    for q0, q1, h in ((x0, x1, hl), (y0, y1, hw)):
        p = q1 - q0
        par = p == 0.0
        ok &= ~(par & ((q0 < -h) | (q0 > h)))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - q0) / p
            tb = (h - q0) / p
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        t0 = np.where(par, t0, np.maximum(t0, lo))
        t1 = np.where(par, t1, np.minimum(t1, hi))
    return ok & (t0 <= t1)


def _seg_hits_many_np(ax, ay, bx, by, boxes):
    cx, cy, co, si = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    hl, hw = boxes[:, 4], boxes[:, 5]
    x0 = co * (ax - cx) + si * (ay - cy)
    y0 = -si * (ax - cx) + co * (ay - cy)
    x1 = co * (bx - cx) + si * (by - cy)
    y1 = -si * (bx - cx) + co * (by - cy)
    return _clip_params_np(x0, y0, x1, y1, hl, hw)


def _occlusion_matrix_np(txs, tys, boxes):
    cx, cy, co, si = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    hl, hw = boxes[:, 4], boxes[:, 5]
    # Segment start is the origin for every target, so the start point in
    # each box frame is constant across targets.
    x0 = np.broadcast_to(-(co * cx + si * cy), (txs.shape[0], boxes.shape[0]))
    y0 = np.broadcast_to(-(-si * cx + co * cy), x0.shape)
    tx = txs[:, None]
    ty = tys[:, None]
    x1 = co * (tx - cx) + si * (ty - cy)
    y1 = -si * (tx - cx) + co * (ty - cy)
    return _clip_params_np(x0, y0, x1, y1, hl, hw)


# -- public dispatchers ------------------------------------------------------


def segment_hits_boxes(ax: float, ay: float, bx: float, by: float,
                       boxes: np.ndarray) -> np.ndarray:
    """Closed intersection test of one segment against packed BEV boxes."""
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    if BACKEND == "numba":
        out = np.empty(n, dtype=np.bool_)
        _seg_hits_many_loop(float(ax), float(ay), float(bx), float(by),
                            boxes, out)
        return out
    return _seg_hits_many_np(float(ax), float(ay), float(bx), float(by), boxes)


def occlusion_matrix(txs: np.ndarray, tys: np.ndarray,
                     boxes: np.ndarray) -> np.ndarray:
    """hits[j, i]: does the segment origin->target j cross box i?"""
    nt, nb = txs.shape[0], boxes.shape[0]
    if nt == 0 or nb == 0:
        return np.zeros((nt, nb), dtype=bool)
    if BACKEND == "numba":
        out = np.empty((nt, nb), dtype=np.bool_)
        _occlusion_matrix_loop(np.ascontiguousarray(txs, dtype=np.float64),
                               np.ascontiguousarray(tys, dtype=np.float64),
                               boxes, out)
        return out
    return _occlusion_matrix_np(txs, tys, boxes)


def rect_intersection_area(corners_a: np.ndarray,
                           corners_b: np.ndarray) -> float:
    """Overlap area of two convex quads given as (4, 2) CCW corner arrays."""
    return float(_clip_area_scalar(
        np.ascontiguousarray(corners_a, dtype=np.float64),
        np.ascontiguousarray(corners_b, dtype=np.float64),
    ))


def backend_variants():
    """Expose both backend implementations for the benchmark script."""
    variants = {
        "numpy": {
            "segment_hits_boxes": _seg_hits_many_np,
            "occlusion_matrix": _occlusion_matrix_np,
        }
    }
    if _HAVE_NUMBA:
        def _seg_nb(ax, ay, bx, by, boxes):
            out = np.empty(boxes.shape[0], dtype=np.bool_)
            _seg_hits_many_loop(ax, ay, bx, by, boxes, out)
            return out

        def _occ_nb(txs, tys, boxes):
            out = np.empty((txs.shape[0], boxes.shape[0]), dtype=np.bool_)
            _occlusion_matrix_loop(txs, tys, boxes, out)
            return out

        variants["numba"] = {
            "segment_hits_boxes": _seg_nb,
            "occlusion_matrix": _occ_nb,
        }
    return variants
