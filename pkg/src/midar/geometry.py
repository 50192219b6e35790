"""BEV oriented-box primitives: corners, rigid transforms, range filtering,
and the segment-vs-box occlusion test.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import kernels

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - angle) % TWO_PI


class VehicleClass(str, Enum):
    CAR = "car"
    TRUCK = "truck"
    BUS = "bus"
    TRAILER = "trailer"
    CONSTRUCTION_VEHICLE = "construction_vehicle"
    OTHER = "other"


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading is wrapped into (-pi, pi] at construction."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class Segment2:
    ax: float
    ay: float
    bx: float
    by: float


@dataclass(frozen=True)
class OrientedBox:
    """A vehicle's 3D bounding box: center, dimensions, yaw about z.

    ``height`` may be 0 when unknown (pre height-regression); ``width`` and
    ``length`` must be positive. ``yaw`` is wrapped into (-pi, pi].
    """

    id: str
    cls: VehicleClass
    cx: float
    cy: float
    cz: float
    width: float
    length: float
    height: float
    yaw: float

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise ValueError(
                f"box {self.id!r}: width and length must be positive "
                f"(got {self.width}, {self.length})")
        if self.height < 0:
            raise ValueError(f"box {self.id!r}: height must be >= 0")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


def box_corners_bev(box: OrientedBox) -> np.ndarray:
    """BEV footprint corners, counter-clockwise, as a (4, 2) array.

    Local order before rotation: (+l/2, +w/2), (-l/2, +w/2),
    (-l/2, -w/2), (+l/2, -w/2).
    """
    hl = 0.5 * box.length
    hw = 0.5 * box.width
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    out = np.empty((4, 2))
    for i, (lx, ly) in enumerate(local):
        out[i, 0] = box.cx + c * lx - s * ly
        out[i, 1] = box.cy + s * lx + c * ly
    return out


def segment_intersects_box_bev(seg: Segment2, box: OrientedBox) -> bool:
    """True iff the closed segment meets the closed BEV footprint.

    Boundary contact counts; a segment fully inside the box counts.
    """
    packed = kernels.pack_boxes(
        np.array([box.cx]), np.array([box.cy]), np.array([box.yaw]),
        np.array([box.length]), np.array([box.width]))
    return bool(kernels.segment_hits_boxes(seg.ax, seg.ay, seg.bx, seg.by,
                                           packed)[0])


def transform_to_ego(box: OrientedBox, ego: Pose2) -> OrientedBox:
    """Rigid 2D transform of a world-frame box into the ego frame.

    The ego sits at the origin with heading 0; cz and dimensions pass
    through unchanged.
    """
    c = math.cos(ego.heading)
    s = math.sin(ego.heading)
    dx = box.cx - ego.x
    dy = box.cy - ego.y
    return replace(
        box,
        cx=c * dx + s * dy,
        cy=-s * dx + c * dy,
        yaw=wrap_angle(box.yaw - ego.heading),
    )


def transform_to_world(box: OrientedBox, ego: Pose2) -> OrientedBox:
    """Inverse of :func:`transform_to_ego`."""
    c = math.cos(ego.heading)
    s = math.sin(ego.heading)
    return replace(
        box,
        cx=ego.x + c * box.cx - s * box.cy,
        cy=ego.y + s * box.cx + c * box.cy,
        yaw=wrap_angle(box.yaw + ego.heading),
    )


def in_detection_range(box: OrientedBox, half_extent: float) -> bool:
    """Square range test on the ego-frame center, boundary inclusive.

    The vertical axis is ignored: simulators and trajectory datasets are
    planar, and the range crop itself is a square in x/y.
    """
    if half_extent <= 0:
        raise ValueError("half_extent must be positive")
    return abs(box.cx) <= half_extent and abs(box.cy) <= half_extent


def find_occluders(origin: tuple[float, float], target: OrientedBox,
                   others: Sequence[OrientedBox]) -> list[str]:
    """Ids of boxes whose footprint crosses the segment origin->target center.

    The target itself is never returned. Results are ordered by planar
    center distance from the origin, ties broken by id. The test is against
    the center-to-center segment only, so a box lying wholly beyond the
    target center does not count.
    """
    ox, oy = origin
    candidates = [b for b in others if b.id != target.id]
    if not candidates:
        return []
    packed = kernels.pack_boxes(
        np.array([b.cx for b in candidates]),
        np.array([b.cy for b in candidates]),
        np.array([b.yaw for b in candidates]),
        np.array([b.length for b in candidates]),
        np.array([b.width for b in candidates]))
    hits = kernels.segment_hits_boxes(ox, oy, target.cx, target.cy, packed)
    blocked = [b for b, hit in zip(candidates, hits) if hit]
    blocked.sort(key=lambda b: (math.hypot(b.cx - ox, b.cy - oy), b.id))
    return [b.id for b in blocked]


def boxes_overlap_bev(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis overlap test of two BEV footprints (closed)."""
    ca = box_corners_bev(a)
    cb = box_corners_bev(b)
    for yaw in (a.yaw, b.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        for ax_x, ax_y in ((c, s), (-s, c)):
            pa = ca[:, 0] * ax_x + ca[:, 1] * ax_y
            pb = cb[:, 0] * ax_x + cb[:, 1] * ax_y
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
