"""Rule-based comparison detection models: Perfect Detection and
distance-bucketed Random Dropout.

Dropout randomness is derived by hashing (seed, scene, frame, vehicle id)
into a unit-interval draw, so runs are reproducible and independent of
vehicle ordering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .dataio import DetectionOutcome
from .rmlos import DEFAULT_HALF_EXTENT, SceneFrame, _ego_frame_nodes


@dataclass(frozen=True)
class DropoutTable:
    """FN probability per distance bucket.

    Bucket i covers distances in (bounds[i-1], bounds[i]]; beyond the last
    bound the last probability applies (covers the square's corners, whose
    planar distance exceeds the largest bound).
    """

    bounds: tuple[float, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "probabilities",
                           tuple(float(p) for p in self.probabilities))
        if len(self.bounds) != len(self.probabilities) or not self.bounds:
            raise ValueError("bounds and probabilities must align and be "
                             "non-empty")
        if any(b2 <= b1 for b1, b2 in zip(self.bounds, self.bounds[1:])):
            raise ValueError("bounds must be strictly increasing")
        if any(not (0.0 <= p <= 1.0) for p in self.probabilities):
            raise ValueError("probabilities must lie in [0, 1]")

    def probability(self, distance: float) -> float:
        for bound, p in zip(self.bounds, self.probabilities):
            if distance <= bound:
                return p
        return self.probabilities[-1]


_BUCKET_BOUNDS = (10.0, 20.0, 30.0, 40.0, 50.0, 54.0)

SIGNAL_CONTROL_PRESET = DropoutTable(
    _BUCKET_BOUNDS, (0.192, 0.249, 0.235, 0.239, 0.234, 0.233))
TRAJECTORY_PRESET = DropoutTable(
    _BUCKET_BOUNDS, (0.026, 0.017, 0.071, 0.231, 0.419, 0.486))

PRESETS = {
    "signal-control": SIGNAL_CONTROL_PRESET,
    "trajectory": TRAJECTORY_PRESET,
}


def perfect_detection(frame: SceneFrame,
                      half_extent: float = DEFAULT_HALF_EXTENT,
                      ) -> list[DetectionOutcome]:
    """Every in-range vehicle is a TP; out-of-range vehicles are omitted."""
    nodes = _ego_frame_nodes(frame, half_extent)
    return [
        DetectionOutcome(scene_id=frame.scene_id, frame_id=frame.frame_id,
                         av_id=frame.ego.id, vehicle_id=vid,
                         label="TP", score=1.0)
        for vid in nodes.ids
    ]


def unit_draw(seed: int, scene_id: str, frame_id: str,
              vehicle_id: str) -> float:
    """Stable uniform draw in [0, 1) from a hashed identity tuple."""
    key = f"{seed}|{scene_id}|{frame_id}|{vehicle_id}".encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def random_dropout(frame: SceneFrame, table: DropoutTable, seed: int,
                   half_extent: float = DEFAULT_HALF_EXTENT,
                   ) -> list[DetectionOutcome]:
    """Each in-range vehicle is independently dropped (FN) with the
    probability of its distance bucket."""
    nodes = _ego_frame_nodes(frame, half_extent)
    outcomes = []
    for vid, dist in zip(nodes.ids, nodes.dist):
        p = table.probability(dist)
        draw = unit_draw(seed, frame.scene_id, frame.frame_id, vid)
        outcomes.append(DetectionOutcome(
            scene_id=frame.scene_id, frame_id=frame.frame_id,
            av_id=frame.ego.id, vehicle_id=vid,
            label="FN" if draw < p else "TP", score=1.0))
    return outcomes
