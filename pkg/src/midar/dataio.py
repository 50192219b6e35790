"""File formats, trajectory ingestion, height regression, observation
fusion, synthetic scene generation, and parameter persistence.

Every persistent format is newline-delimited JSON (one record per line)
for streamability and diffability. Readers reject duplicate keys with a
diagnostic naming the offending key.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import (DataError, MalformedRecordError, NumericError,
                     SchemaVersionError, ShapeMismatchError)
from .geometry import (OrientedBox, Pose2, VehicleClass, boxes_overlap_bev,
                       find_occluders)
from .geometry import transform_to_ego
from .rmlos import (DEFAULT_EGO_DIMS, DEFAULT_HALF_EXTENT, DEFAULT_SENSOR_Z,
                    EgoState, FeatureStats, SceneFrame)


@dataclass(frozen=True)
class TrajectoryRow:
    frame_id: str
    vehicle_id: str
    x: float
    y: float
    length: float
    width: float
    heading: float
    height: float | None = None
    lane_index: int | None = None


@dataclass(frozen=True)
class HeightModel:
    """Linear height estimate: height = a * length + b * width + c."""

    a: float
    b: float
    c: float

    def predict(self, length: float, width: float) -> float:
        return self.a * length + self.b * width + self.c


# Fallback coefficients fitted on a small table of typical vehicle
# dimensions; refit with `midar fit-height` on real measurements.
DEFAULT_HEIGHT_MODEL = HeightModel(a=0.133771, b=1.331147, c=-1.415743)


@dataclass(frozen=True)
class DetectionOutcome:
    scene_id: str
    frame_id: str
    av_id: str
    vehicle_id: str
    label: str  # "TP" or "FN"
    score: float

    def __post_init__(self):
        if self.label not in ("TP", "FN"):
            raise ValueError(f"label must be TP or FN, got {self.label!r}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


# -- JSONL helpers -----------------------------------------------------------


def _iter_records(stream: TextIO, source: str):
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(
                f"{source}:{lineno}: invalid record: {exc}") from exc


def _box_from_record(rec: Mapping, source: str) -> OrientedBox:
    try:
        return OrientedBox(
            id=str(rec["id"]), cls=VehicleClass(rec.get("class", "other")),
            cx=float(rec["x"]), cy=float(rec["y"]), cz=float(rec.get("z", 0.0)),
            width=float(rec["w"]), length=float(rec["l"]),
            height=float(rec.get("h", 0.0)), yaw=float(rec["heading"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{source}: bad box record: {exc}") from exc


def _box_to_record(box: OrientedBox) -> dict:
    return {"id": box.id, "class": box.cls.value, "x": box.cx, "y": box.cy,
            "z": box.cz, "w": box.width, "l": box.length, "h": box.height,
            "heading": box.yaw}


def frame_from_record(rec: Mapping, source: str = "<frame>") -> SceneFrame:
    try:
        ego_rec = rec["ego"]
        dims = ego_rec.get("dims", {})
        ego = EgoState(
            id=str(ego_rec.get("id", "ego")),
            pose=Pose2(float(ego_rec["x"]), float(ego_rec["y"]),
                       float(ego_rec["heading"])),
            z_offset=float(ego_rec.get("z_offset", DEFAULT_SENSOR_Z)),
            width=float(dims.get("w", DEFAULT_EGO_DIMS[0])),
            length=float(dims.get("l", DEFAULT_EGO_DIMS[1])),
            height=float(dims.get("h", DEFAULT_EGO_DIMS[2])))
        vehicles = tuple(_box_from_record(v, source)
                         for v in rec.get("vehicles", []))
        return SceneFrame(
            scene_id=str(rec["scene_id"]), frame_id=str(rec["frame_id"]),
            timestamp=float(rec.get("timestamp", 0.0)),
            ego=ego, vehicles=vehicles)
    except MalformedRecordError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{source}: bad frame record: {exc}") from exc


def frame_to_record(frame: SceneFrame) -> dict:
    return {
        "scene_id": frame.scene_id, "frame_id": frame.frame_id,
        "timestamp": frame.timestamp,
        "ego": {"id": frame.ego.id, "x": frame.ego.pose.x,
                "y": frame.ego.pose.y, "heading": frame.ego.pose.heading,
                "z_offset": frame.ego.z_offset,
                "dims": {"w": frame.ego.width, "l": frame.ego.length,
                         "h": frame.ego.height}},
        "vehicles": [_box_to_record(v) for v in frame.vehicles],
    }


def read_frames(path: str | Path) -> list[SceneFrame]:
    frames = []
    seen = set()
    with open(path, encoding="utf-8") as stream:
        for lineno, rec in _iter_records(stream, str(path)):
            frame = frame_from_record(rec, f"{path}:{lineno}")
            key = (frame.scene_id, frame.frame_id, frame.ego.id)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate frame key {key}")
            seen.add(key)
            frames.append(frame)
    return frames


def write_frames(frames: Iterable[SceneFrame], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for frame in frames:
            stream.write(json.dumps(frame_to_record(frame)) + "\n")


def read_predictions(path: str | Path) -> dict[tuple[str, str], list]:
    """Predicted boxes with scores, keyed by (scene_id, frame_id)."""
    from .labeling import PredBox  # deferred: labeling imports geometry only

    preds: dict[tuple[str, str], list] = {}
    seen = set()
    with open(path, encoding="utf-8") as stream:
        for lineno, rec in _iter_records(stream, str(path)):
            try:
                key = (str(rec["scene_id"]), str(rec["frame_id"]))
                boxes = []
                for b in rec.get("boxes", []):
                    box = _box_from_record(b, f"{path}:{lineno}")
                    boxes.append(PredBox(box=box, score=float(b["score"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecordError(
                    f"{path}:{lineno}: bad prediction record: {exc}") from exc
            for p in boxes:
                k = key + (p.box.id,)
                if k in seen:
                    raise DataError(
                        f"{path}:{lineno}: duplicate prediction key {k}")
                seen.add(k)
            preds.setdefault(key, []).extend(boxes)
    return preds


def write_predictions(preds: Mapping[tuple[str, str], Sequence],
                      path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for (scene_id, frame_id), boxes in preds.items():
            rec = {"scene_id": scene_id, "frame_id": frame_id,
                   "boxes": [dict(_box_to_record(p.box), score=p.score)
                             for p in boxes]}
            stream.write(json.dumps(rec) + "\n")


def read_labels(path: str | Path) -> dict[tuple[str, str, str], int]:
    labels: dict[tuple[str, str, str], int] = {}
    with open(path, encoding="utf-8") as stream:
        for lineno, rec in _iter_records(stream, str(path)):
            try:
                key = (str(rec["scene_id"]), str(rec["frame_id"]),
                       str(rec["vehicle_id"]))
                value = int(rec["label"])
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecordError(
                    f"{path}:{lineno}: bad label record: {exc}") from exc
            if value not in (0, 1):
                raise MalformedRecordError(
                    f"{path}:{lineno}: label must be 0 or 1, got {value}")
            if key in labels:
                raise DataError(f"{path}:{lineno}: duplicate label key {key}")
            labels[key] = value
    return labels


def write_labels(labels: Mapping[tuple[str, str, str], int],
                 path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for (scene_id, frame_id, vehicle_id), value in labels.items():
            stream.write(json.dumps({
                "scene_id": scene_id, "frame_id": frame_id,
                "vehicle_id": vehicle_id, "label": value}) + "\n")


def read_outcomes(path: str | Path) -> list[DetectionOutcome]:
    outcomes = []
    seen = set()
    with open(path, encoding="utf-8") as stream:
        for lineno, rec in _iter_records(stream, str(path)):
            try:
                out = DetectionOutcome(
                    scene_id=str(rec["scene_id"]),
                    frame_id=str(rec["frame_id"]),
                    av_id=str(rec["av_id"]),
                    vehicle_id=str(rec["vehicle_id"]),
                    label=str(rec["label"]), score=float(rec["score"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecordError(
                    f"{path}:{lineno}: bad outcome record: {exc}") from exc
            key = (out.scene_id, out.frame_id, out.av_id, out.vehicle_id)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate outcome key {key}")
            seen.add(key)
            outcomes.append(out)
    return outcomes


def write_outcomes(outcomes: Iterable[DetectionOutcome],
                   path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for out in outcomes:
            stream.write(json.dumps({
                "scene_id": out.scene_id, "frame_id": out.frame_id,
                "av_id": out.av_id, "vehicle_id": out.vehicle_id,
                "label": out.label, "score": out.score}) + "\n")


# -- trajectory ingestion ----------------------------------------------------

_REQUIRED_COLUMNS = ("frame_id", "vehicle_id", "x", "y", "length", "width",
                     "heading")
_OPTIONAL_COLUMNS = ("height", "lane_index")


def read_column_mapping(path: str | Path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as stream:
            rec = json.load(stream)
        mapping = dict(rec["columns"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedRecordError(f"{path}: bad column mapping: {exc}") from exc
    missing = [c for c in _REQUIRED_COLUMNS if c not in mapping]
    if missing:
        raise MalformedRecordError(
            f"{path}: column mapping missing fields {missing}")
    return mapping


def read_trajectory_csv(path: str | Path,
                        mapping: Mapping[str, str]) -> list[TrajectoryRow]:
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as stream:
        reader = csv.DictReader(stream)
        for lineno, rec in enumerate(reader, start=2):
            try:
                height = None
                if "height" in mapping and rec.get(mapping["height"], "") != "":
                    height = float(rec[mapping["height"]])
                lane = None
                if ("lane_index" in mapping
                        and rec.get(mapping["lane_index"], "") != ""):
                    lane = int(float(rec[mapping["lane_index"]]))
                row = TrajectoryRow(
                    frame_id=str(rec[mapping["frame_id"]]),
                    vehicle_id=str(rec[mapping["vehicle_id"]]),
                    x=float(rec[mapping["x"]]), y=float(rec[mapping["y"]]),
                    length=float(rec[mapping["length"]]),
                    width=float(rec[mapping["width"]]),
                    heading=float(rec[mapping["heading"]]),
                    height=height, lane_index=lane)
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecordError(
                    f"{path}:{lineno}: bad trajectory row: {exc}") from exc
            if row.length <= 0 or row.width <= 0:
                raise MalformedRecordError(
                    f"{path}:{lineno}: non-positive dimensions for vehicle "
                    f"{row.vehicle_id!r}")
            key = (row.frame_id, row.vehicle_id)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate trajectory key "
                                f"{key}")
            seen.add(key)
            rows.append(row)
    return rows


def _class_from_length(length: float) -> VehicleClass:
    # Trajectory datasets rarely carry a class; bucket by length.
    if length < 6.0:
        return VehicleClass.CAR
    if length < 9.0:
        return VehicleClass.TRUCK
    return VehicleClass.BUS


def _row_to_box(row: TrajectoryRow, height_model: HeightModel) -> OrientedBox:
    height = row.height
    if height is None:
        height = max(height_model.predict(row.length, row.width), 0.1)
    return OrientedBox(
        id=row.vehicle_id, cls=_class_from_length(row.length),
        cx=row.x, cy=row.y, cz=0.5 * height,
        width=row.width, length=row.length, height=height, yaw=row.heading)


def trajectory_to_frames(rows: Sequence[TrajectoryRow], av_ids: set[str], *,
                         scene_id: str = "traj",
                         z_offset: float = DEFAULT_SENSOR_Z,
                         height_model: HeightModel = DEFAULT_HEIGHT_MODEL,
                         ) -> tuple[list[SceneFrame], int]:
    """One SceneFrame per (frame, AV) pair; the AV's own row becomes the
    ego. Missing heights are filled by the height model; box centers sit at
    half height above ground. Returns (frames, skipped-pair count)."""
    by_frame: dict[str, list[TrajectoryRow]] = {}
    for row in rows:
        by_frame.setdefault(row.frame_id, []).append(row)

    def frame_key(fid: str):
        try:
            return (0, float(fid), fid)
        except ValueError:
            return (1, 0.0, fid)

    frames: list[SceneFrame] = []
    skipped = 0
    for fid in sorted(by_frame, key=frame_key):
        group = by_frame[fid]
        present = {r.vehicle_id: r for r in group}
        for av in sorted(av_ids):
            av_row = present.get(av)
            if av_row is None:
                skipped += 1
                continue
            ego_box = _row_to_box(av_row, height_model)
            ego = EgoState(
                id=av, pose=Pose2(av_row.x, av_row.y, av_row.heading),
                z_offset=z_offset, width=av_row.width, length=av_row.length,
                height=ego_box.height)
            vehicles = tuple(_row_to_box(r, height_model)
                             for r in group if r.vehicle_id != av)
            frames.append(SceneFrame(
                scene_id=scene_id, frame_id=fid, timestamp=0.0,
                ego=ego, vehicles=vehicles))
    return frames, skipped


def fit_height_regression(samples) -> HeightModel:
    """Least-squares fit of height on (length, width, 1).

    Requires at least three samples whose design matrix has full rank.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("samples must be (n, 3): length, width, height")
    if arr.shape[0] < 3:
        raise NumericError("height regression needs >= 3 samples")
    design = np.column_stack([arr[:, 0], arr[:, 1], np.ones(arr.shape[0])])
    if np.linalg.matrix_rank(design) < 3:
        raise NumericError("height regression design matrix is rank-deficient")
    coef, *_ = np.linalg.lstsq(design, arr[:, 2], rcond=None)
    return HeightModel(a=float(coef[0]), b=float(coef[1]), c=float(coef[2]))


def fuse_observations(outcomes: Sequence[DetectionOutcome]) -> set[str]:
    """Union fusion over one frame: a vehicle is detected iff at least one
    AV labeled it TP, or it is itself an AV."""
    if not outcomes:
        return set()
    frames = {(o.scene_id, o.frame_id) for o in outcomes}
    if len(frames) > 1:
        raise DataError(f"fuse_observations spans multiple frames: {frames}")
    detected = {o.av_id for o in outcomes}
    detected.update(o.vehicle_id for o in outcomes if o.label == "TP")
    return detected


# -- synthetic scenes --------------------------------------------------------

_SYNTH_CLASSES = (
    (VehicleClass.CAR, 0.70, (1.7, 2.1), (3.9, 5.2), (1.4, 1.8)),
    (VehicleClass.TRUCK, 0.12, (2.2, 2.6), (6.0, 9.5), (2.4, 3.6)),
    (VehicleClass.BUS, 0.08, (2.4, 2.6), (10.0, 12.5), (3.0, 3.5)),
    (VehicleClass.TRAILER, 0.04, (2.4, 2.7), (9.0, 13.0), (3.2, 4.0)),
    (VehicleClass.CONSTRUCTION_VEHICLE, 0.03, (2.3, 2.9), (5.0, 8.0),
     (2.8, 3.4)),
    (VehicleClass.OTHER, 0.03, (1.6, 2.2), (3.0, 6.0), (1.5, 2.5)),
)


def synth_labels_for_frame(frame: SceneFrame, *,
                           occluded_fn_distance: float = 20.0,
                           far_fn_distance: float = 48.0) -> dict[str, int]:
    """Deterministic labeling rule for synthetic corpora.

    FN iff (the vehicle has at least one occluder and sits farther than
    ``occluded_fn_distance``) or it sits farther than ``far_fn_distance``;
    TP otherwise. A pure function of the occlusion layout, so labels can be
    recomputed from the frame at any time.
    """
    local = [transform_to_ego(v, frame.ego.pose) for v in frame.vehicles]
    labels = {}
    for box in local:
        dist = math.hypot(box.cx, box.cy)
        occluded = bool(find_occluders((0.0, 0.0), box, local))
        fn = (occluded and dist > occluded_fn_distance) or dist > far_fn_distance
        labels[box.id] = int(fn)
    return labels


def synth_scenes(seed: int, n_frames: int, density: float = 10.0, *,
                 half_extent: float = DEFAULT_HALF_EXTENT,
                 scene_id: str = "synth",
                 occluded_fn_distance: float = 20.0,
                 far_fn_distance: float = 48.0,
                 ) -> list[tuple[SceneFrame, dict[str, int]]]:
    """Reproducible corpus of random non-overlapping frames with labels
    from :func:`synth_labels_for_frame`."""
    rng = np.random.default_rng(seed)
    class_probs = np.array([c[1] for c in _SYNTH_CLASSES])
    class_probs = class_probs / class_probs.sum()
    ego = EgoState(id="ego", pose=Pose2(0.0, 0.0, 0.0))

    corpus = []
    for f in range(n_frames):
        target = rng.poisson(density)
        placed: list[OrientedBox] = []
        attempts = 0
        while len(placed) < target and attempts < 40 * max(target, 1):
            attempts += 1
            ci = rng.choice(len(_SYNTH_CLASSES), p=class_probs)
            cls, _, w_rng, l_rng, h_rng = _SYNTH_CLASSES[ci]
            width = rng.uniform(*w_rng)
            length = rng.uniform(*l_rng)
            height = rng.uniform(*h_rng)
            cx = rng.uniform(-half_extent, half_extent)
            cy = rng.uniform(-half_extent, half_extent)
            yaw = rng.uniform(-math.pi, math.pi)
            if math.hypot(cx, cy) < 6.0:
                continue
            box = OrientedBox(
                id=f"v{len(placed):03d}", cls=cls, cx=cx, cy=cy,
                cz=0.5 * height, width=width, length=length, height=height,
                yaw=yaw)
            if any(boxes_overlap_bev(box, other) for other in placed):
                continue
            placed.append(box)
        frame = SceneFrame(scene_id=scene_id, frame_id=f"{f:05d}",
                           timestamp=0.1 * f, ego=ego,
                           vehicles=tuple(placed))
        labels = synth_labels_for_frame(
            frame, occluded_fn_distance=occluded_fn_distance,
            far_fn_distance=far_fn_distance)
        corpus.append((frame, labels))
    return corpus


# -- parameter persistence ---------------------------------------------------


def serialize_params(params, path: str | Path) -> None:
    """Write model parameters as structured JSON text.

    Floats serialize via repr, which round-trips binary64 exactly, so a
    save/load cycle reproduces forward outputs bit-for-bit.
    """
    record = {
        "schema_version": params.schema_version,
        "hyper": {
            "hidden_dim": params.hidden_dim,
            "iterations": params.iterations,
            "alpha": params.alpha,
            "dropout_rate": params.dropout_rate,
        },
        "feature_stats": {
            "mean": params.stats.mean.tolist(),
            "std": params.stats.std.tolist(),
        },
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params.tensors().items()
        },
    }
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(record, stream)
        stream.write("\n")


def load_params(path: str | Path):
    from .model import SCHEMA_VERSION, ModelParams, TENSOR_NAMES

    try:
        with open(path, encoding="utf-8") as stream:
            record = json.load(stream)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedRecordError(f"{path}: malformed params file: {exc}") from exc

    version = record.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported schema version {version!r} "
            f"(expected {SCHEMA_VERSION})")

    try:
        hyper = record["hyper"]
        stats_rec = record["feature_stats"]
        tensors_rec = record["tensors"]
    except (KeyError, TypeError) as exc:
        raise MalformedRecordError(f"{path}: missing section: {exc}") from exc

    tensors = {}
    for name in TENSOR_NAMES:
        if name not in tensors_rec:
            raise MalformedRecordError(f"{path}: missing tensor {name!r}")
        entry = tensors_rec[name]
        try:
            shape = tuple(int(s) for s in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(
                f"{path}: bad tensor entry {name!r}: {exc}") from exc
        if data.size != int(np.prod(shape)):
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} declares shape {shape} but has "
                f"{data.size} values")
        tensors[name] = data.reshape(shape)

    try:
        stats = FeatureStats(np.asarray(stats_rec["mean"], dtype=np.float64),
                             np.asarray(stats_rec["std"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{path}: bad feature stats: {exc}") from exc

    try:
        return ModelParams(
            **tensors,
            iterations=int(hyper["iterations"]),
            alpha=float(hyper["alpha"]),
            hidden_dim=int(hyper["hidden_dim"]),
            dropout_rate=float(hyper["dropout_rate"]),
            stats=stats, schema_version=version)
    except (KeyError, TypeError) as exc:
        raise MalformedRecordError(f"{path}: bad hyperparameters: {exc}") from exc
    except ValueError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
