"""Construction of the refined multi-hop line-of-sight (RM-LoS) graph.

An unobstructed vehicle is connected straight to the ego node; an
obstructed one is reached through its occluders (ego -> occluder and
occluder -> target). All edges point from nearer to farther vehicles, so
every graph is a DAG rooted at the ego node. Edges carry no attributes;
they exist purely as message-passing pathways.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import OrientedBox, Pose2

DEFAULT_HALF_EXTENT = 54.0
NUM_FEATURES = 9
STD_FLOOR = 1e-6

# Fallback ego vehicle dimensions (width, length, height) when the host
# simulator does not report them.
DEFAULT_EGO_DIMS = (1.9, 4.5, 1.6)
DEFAULT_SENSOR_Z = 1.7


@dataclass(frozen=True)
class EgoState:
    """Ego vehicle pose plus sensor mount height and body dimensions."""

    id: str
    pose: Pose2
    z_offset: float = DEFAULT_SENSOR_Z
    width: float = DEFAULT_EGO_DIMS[0]
    length: float = DEFAULT_EGO_DIMS[1]
    height: float = DEFAULT_EGO_DIMS[2]


@dataclass(frozen=True)
class SceneFrame:
    """One ego pose plus all surrounding vehicles at one timestamp."""

    scene_id: str
    frame_id: str
    timestamp: float
    ego: EgoState
    vehicles: tuple[OrientedBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        seen = set()
        for v in self.vehicles:
            if v.id in seen:
                raise ValueError(
                    f"duplicate vehicle id {v.id!r} in frame "
                    f"({self.scene_id}, {self.frame_id})")
            seen.add(v.id)
        if self.ego.id in seen:
            raise ValueError(
                f"ego id {self.ego.id!r} collides with a vehicle id in "
                f"frame ({self.scene_id}, {self.frame_id})")


@dataclass(frozen=True)
class RMLoSGraph:
    """Directed occlusion graph over one frame.

    Node 0 is the ego; remaining nodes are in-range vehicles ordered by
    (distance, id) so construction is independent of input ordering.
    ``features`` rows align with ``node_ids``.
    """

    node_ids: tuple[str, ...]
    features: np.ndarray
    edges: frozenset[tuple[int, int]]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def distances(self) -> np.ndarray:
        return self.features[:, 8]


@dataclass
class FeatureStats:
    """Per-feature mean/std for normalization; std floored at 1e-6."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64),
                              STD_FLOOR)
        if self.mean.shape != (NUM_FEATURES,) or self.std.shape != (NUM_FEATURES,):
            raise ValueError("feature stats must have 9 entries per vector")

    @staticmethod
    def identity() -> "FeatureStats":
        return FeatureStats(np.zeros(NUM_FEATURES), np.ones(NUM_FEATURES))


@dataclass
class _EgoFrameNodes:
    """In-range vehicles as column arrays, sorted by (distance, id)."""

    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    width: np.ndarray
    length: np.ndarray
    height: np.ndarray
    heading: np.ndarray
    dist: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


_EMPTY = np.zeros(0)


def _ego_frame_nodes(frame: SceneFrame, half_extent: float) -> _EgoFrameNodes:
    boxes = frame.vehicles
    if not boxes:
        return _EgoFrameNodes([], *[_EMPTY] * 8)
    pose = frame.ego.pose
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    wx = np.array([b.cx for b in boxes])
    wy = np.array([b.cy for b in boxes])
    dx = wx - pose.x
    dy = wy - pose.y
    x = c * dx + s * dy
    y = -s * dx + c * dy
    keep = (np.abs(x) <= half_extent) & (np.abs(y) <= half_extent)
    kept = [b for b, k in zip(boxes, keep) if k]
    x = x[keep]
    y = y[keep]
    dist = np.hypot(x, y)
    order = sorted(range(len(kept)), key=lambda i: (dist[i], kept[i].id))
    idx = np.array(order, dtype=np.int64)
    heading_raw = np.array([kept[i].yaw for i in order]) - pose.heading
    # wrap into (-pi, pi] to honor the heading invariant
    heading = math.pi - (math.pi - heading_raw) % (2.0 * math.pi)
    return _EgoFrameNodes(
        ids=[kept[i].id for i in order],
        x=x[idx], y=y[idx],
        z=np.array([kept[i].cz for i in order]) - frame.ego.z_offset,
        width=np.array([kept[i].width for i in order]),
        length=np.array([kept[i].length for i in order]),
        height=np.array([kept[i].height for i in order]),
        heading=heading, dist=dist[idx])


def _feature_matrix(frame: SceneFrame, nodes: _EgoFrameNodes) -> np.ndarray:
    ego = frame.ego
    x = np.empty((len(nodes) + 1, NUM_FEATURES))
    x[0] = (0.0, 0.0, 0.5 * ego.height - ego.z_offset,
            ego.width, ego.length, ego.height, 0.0, 1.0, 0.0)
    x[1:, 0] = nodes.x
    x[1:, 1] = nodes.y
    x[1:, 2] = nodes.z
    x[1:, 3] = nodes.width
    x[1:, 4] = nodes.length
    x[1:, 5] = nodes.height
    x[1:, 6] = np.sin(nodes.heading)
    x[1:, 7] = np.cos(nodes.heading)
    x[1:, 8] = nodes.dist
    return x


def build_rmlos(frame: SceneFrame,
                half_extent: float = DEFAULT_HALF_EXTENT) -> RMLoSGraph:
    """Build the RM-LoS graph for one frame.

    Vehicles outside the square range are dropped. For each remaining
    vehicle: an unobstructed one gets the direct edge ego->v; otherwise
    each blocker u contributes ego->u and u->v. After deduplication any
    edge whose source is not strictly nearer than its destination is
    removed, which guarantees acyclicity.
    """
    nodes = _ego_frame_nodes(frame, half_extent)
    n = len(nodes)
    edges: set[tuple[int, int]] = set()
    if n:
        packed = kernels.pack_boxes(nodes.x, nodes.y, nodes.heading,
                                    nodes.length, nodes.width)
        hits = kernels.occlusion_matrix(nodes.x, nodes.y, packed)
        np.fill_diagonal(hits, False)
        direct = np.flatnonzero(~hits.any(axis=1))
        targets, blockers = np.nonzero(hits)
        src = np.concatenate([np.zeros(len(direct) + len(blockers),
                                       dtype=np.int64),
                              blockers + 1])
        dst = np.concatenate([direct + 1, blockers + 1, targets + 1])
        dist = np.concatenate(([0.0], nodes.dist))
        keep = dist[src] < dist[dst]
        edges = set(zip(src[keep].tolist(), dst[keep].tolist()))
    else:
        dist = np.zeros(1)

    graph = RMLoSGraph(
        node_ids=(frame.ego.id,) + tuple(nodes.ids),
        features=_feature_matrix(frame, nodes),
        edges=frozenset(edges),
    )
    # Every edge strictly increases distance from the ego, hence no cycles.
    assert all(dist[u] < dist[v] for (u, v) in graph.edges)
    return graph


def node_features(frame: SceneFrame,
                  half_extent: float = DEFAULT_HALF_EXTENT) -> np.ndarray:
    """Feature matrix (n x 9), row 0 = ego, aligned with build_rmlos order.

    Columns: x, y, z (ego frame, z relative to the sensor), width, length,
    height, sin(heading), cos(heading), planar distance from the ego.
    """
    return _feature_matrix(frame, _ego_frame_nodes(frame, half_extent))


def propagation_matrix(graph: RMLoSGraph) -> np.ndarray:
    """Row-stochastic propagation matrix with self-loops.

    Row i spreads weight 1/(in_degree(i)+1) over i itself and every
    predecessor j with edge j->i, keeping each propagation step a convex
    combination of neighbor embeddings.
    """
    n = graph.n_nodes
    mat = np.zeros((n, n))
    indeg = np.zeros(n, dtype=np.int64)
    for _, v in graph.edges:
        indeg[v] += 1
    inv = 1.0 / (indeg + 1.0)
    np.fill_diagonal(mat, inv)
    for u, v in graph.edges:
        mat[v, u] = inv[v]
    return mat


def fit_feature_stats(corpus: Sequence[np.ndarray]) -> FeatureStats:
    """Per-feature mean and (population) standard deviation over a corpus
    of feature matrices."""
    if not corpus:
        raise ValueError("feature corpus is empty")
    stacked = np.concatenate([np.asarray(x).reshape(-1, NUM_FEATURES)
                              for x in corpus], axis=0)
    return FeatureStats(stacked.mean(axis=0), stacked.std(axis=0))


def normalize_features(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (x - stats.mean) / stats.std


def denormalize_features(x_norm: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return x_norm * stats.std + stats.mean
