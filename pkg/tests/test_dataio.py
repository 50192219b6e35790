import json
import math

import numpy as np
import pytest

from midar import model
from midar.dataio import (DEFAULT_HEIGHT_MODEL, DetectionOutcome,
                          TrajectoryRow, fit_height_regression,
                          fuse_observations, load_params, read_frames,
                          read_labels, read_outcomes, read_trajectory_csv,
                          serialize_params, synth_labels_for_frame,
                          synth_scenes, trajectory_to_frames, write_frames,
                          write_labels, write_outcomes)
from midar.errors import (DataError, MalformedRecordError, NumericError,
                          SchemaVersionError, ShapeMismatchError)
from midar.geometry import transform_to_world

from conftest import make_box, make_frame, random_box


class TestFramesFile:
    def test_round_trip(self, rng, tmp_path):
        frames = [make_frame([random_box(rng, f"v{i}") for i in range(4)],
                             frame=f"f{j}", ego_xy=(j, -j), ego_heading=0.3)
                  for j in range(5)]
        path = tmp_path / "frames.jsonl"
        write_frames(frames, path)
        loaded = read_frames(path)
        assert len(loaded) == 5
        for a, b in zip(frames, loaded):
            assert a == b

    def test_duplicate_frame_key_rejected(self, tmp_path):
        frame = make_frame([make_box("v", x=3, y=3)])
        path = tmp_path / "frames.jsonl"
        write_frames([frame, frame], path)
        with pytest.raises(DataError, match="duplicate frame key"):
            read_frames(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "frames.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(MalformedRecordError):
            read_frames(path)

    def test_bad_box_diagnostic(self, tmp_path):
        rec = {"scene_id": "s", "frame_id": "f", "timestamp": 0,
               "ego": {"id": "ego", "x": 0, "y": 0, "heading": 0},
               "vehicles": [{"id": "v", "class": "car", "x": 1}]}
        path = tmp_path / "frames.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(MalformedRecordError, match="bad box record"):
            read_frames(path)


class TestLabelsFile:
    def test_round_trip_and_duplicates(self, tmp_path):
        labels = {("s", "f0", "a"): 0, ("s", "f0", "b"): 1}
        path = tmp_path / "labels.jsonl"
        write_labels(labels, path)
        assert read_labels(path) == labels
        with open(path, "a", encoding="utf-8") as stream:
            stream.write(json.dumps({"scene_id": "s", "frame_id": "f0",
                                     "vehicle_id": "a", "label": 1}) + "\n")
        with pytest.raises(DataError, match="duplicate label key"):
            read_labels(path)

    def test_label_value_validated(self, tmp_path):
        path = tmp_path / "labels.jsonl"
        path.write_text(json.dumps({"scene_id": "s", "frame_id": "f",
                                    "vehicle_id": "v", "label": 2}) + "\n")
        with pytest.raises(MalformedRecordError):
            read_labels(path)


class TestOutcomesFile:
    def test_round_trip_and_duplicates(self, tmp_path):
        outcomes = [DetectionOutcome("s", "f", "av1", "v1", "TP", 1.0),
                    DetectionOutcome("s", "f", "av1", "v2", "FN", 0.8)]
        path = tmp_path / "outcomes.jsonl"
        write_outcomes(outcomes, path)
        assert read_outcomes(path) == outcomes
        write_outcomes(outcomes + outcomes[:1], path)
        with pytest.raises(DataError, match="duplicate outcome key"):
            read_outcomes(path)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            DetectionOutcome("s", "f", "av", "v", "MAYBE", 0.5)


class TestTrajectoryIngestion:
    MAPPING = {"frame_id": "Frame", "vehicle_id": "Veh", "x": "X", "y": "Y",
               "length": "Len", "width": "Wid", "heading": "Hdg",
               "height": "Hgt"}

    def write_csv(self, tmp_path, rows):
        path = tmp_path / "traj.csv"
        header = "Frame,Veh,X,Y,Len,Wid,Hdg,Hgt\n"
        path.write_text(header + "".join(rows))
        return path

    def test_read_rows(self, tmp_path):
        path = self.write_csv(tmp_path, ["1,a,0,0,4.5,1.8,0.0,\n",
                                         "1,b,10,0,4.5,1.8,0.0,1.6\n"])
        rows = read_trajectory_csv(path, self.MAPPING)
        assert rows[0].height is None
        assert rows[1].height == 1.6

    def test_duplicate_key_rejected(self, tmp_path):
        path = self.write_csv(tmp_path, ["1,a,0,0,4.5,1.8,0.0,\n",
                                         "1,a,5,0,4.5,1.8,0.0,\n"])
        with pytest.raises(DataError, match="duplicate trajectory key"):
            read_trajectory_csv(path, self.MAPPING)

    def test_single_av_frame(self):
        rows = [TrajectoryRow("1", v, x, 0.0, 4.5, 1.8, 0.0)
                for v, x in (("a", 0.0), ("b", 10.0), ("c", 20.0))]
        frames, skipped = trajectory_to_frames(rows, {"a"})
        assert skipped == 0
        assert len(frames) == 1
        assert frames[0].ego.id == "a"
        assert {v.id for v in frames[0].vehicles} == {"b", "c"}

    def test_two_avs_two_frames(self):
        rows = [TrajectoryRow("1", f"v{i}", float(i * 5), 0.0, 4.5, 1.8, 0.0)
                for i in range(5)]
        frames, _ = trajectory_to_frames(rows, {"v0", "v3"})
        assert len(frames) == 2
        assert all(len(f.vehicles) == 4 for f in frames)
        assert {f.ego.id for f in frames} == {"v0", "v3"}

    def test_missing_av_row_skipped_with_count(self):
        rows = [TrajectoryRow("1", "a", 0.0, 0.0, 4.5, 1.8, 0.0),
                TrajectoryRow("2", "b", 0.0, 0.0, 4.5, 1.8, 0.0)]
        frames, skipped = trajectory_to_frames(rows, {"a"})
        assert len(frames) == 1 and skipped == 1

    def test_height_filled_by_model(self):
        rows = [TrajectoryRow("1", "a", 0.0, 0.0, 4.5, 1.8, 0.0),
                TrajectoryRow("1", "b", 10.0, 0.0, 4.5, 1.8, 0.0)]
        frames, _ = trajectory_to_frames(rows, {"a"})
        want = DEFAULT_HEIGHT_MODEL.predict(4.5, 1.8)
        box = frames[0].vehicles[0]
        assert math.isclose(box.height, want)
        assert math.isclose(box.cz, want / 2)  # center sits at half height

    def test_world_round_trip(self, rng):
        rows = []
        for i in range(6):
            rows.append(TrajectoryRow(
                "1", f"v{i}", float(rng.uniform(-40, 40)),
                float(rng.uniform(-40, 40)), 4.5, 1.8,
                float(rng.uniform(-math.pi, math.pi)), height=1.6))
        frames, _ = trajectory_to_frames(rows, {"v0"})
        frame = frames[0]
        source = {r.vehicle_id: r for r in rows}
        from midar.geometry import transform_to_ego
        for box in frame.vehicles:
            back = transform_to_world(transform_to_ego(box, frame.ego.pose),
                                      frame.ego.pose)
            row = source[box.id]
            assert abs(back.cx - row.x) < 1e-9
            assert abs(back.cy - row.y) < 1e-9


class TestHeightRegression:
    def test_exact_recovery(self, rng):
        lengths = rng.uniform(3, 12, size=20)
        widths = rng.uniform(1.5, 2.6, size=20)
        heights = 0.3 * lengths + 0.5 * widths + 0.2
        fit = fit_height_regression(np.column_stack([lengths, widths,
                                                     heights]))
        assert abs(fit.a - 0.3) < 1e-9
        assert abs(fit.b - 0.5) < 1e-9
        assert abs(fit.c - 0.2) < 1e-9

    def test_matches_normal_equations_oracle(self, rng):
        samples = np.column_stack([
            rng.uniform(3, 12, size=30), rng.uniform(1.5, 2.6, size=30),
            rng.uniform(1.3, 4.0, size=30)])
        fit = fit_height_regression(samples)
        design = np.column_stack([samples[:, 0], samples[:, 1],
                                  np.ones(30)])
        want = np.linalg.inv(design.T @ design) @ design.T @ samples[:, 2]
        assert np.abs(np.array([fit.a, fit.b, fit.c]) - want).max() < 1e-9
        # least-squares residual is orthogonal to the design columns
        resid = samples[:, 2] - design @ want
        assert np.abs(design.T @ resid).max() < 1e-9

    def test_too_few_samples(self):
        with pytest.raises(NumericError):
            fit_height_regression([[4, 2, 1.5], [5, 2, 1.6]])

    def test_rank_deficient_design(self):
        samples = [[4.0, 2.0, 1.5], [4.0, 2.0, 1.7], [4.0, 2.0, 1.9],
                   [4.0, 2.0, 2.1]]
        with pytest.raises(NumericError, match="rank-deficient"):
            fit_height_regression(samples)


class TestFusion:
    def out(self, av, vid, label):
        return DetectionOutcome("s", "f", av, vid, label, 1.0)

    def test_redundant_detection_appears_once(self):
        fused = fuse_observations([self.out("av1", "7", "TP"),
                                   self.out("av2", "7", "TP")])
        assert fused == {"av1", "av2", "7"}

    def test_union_semantics(self):
        fused = fuse_observations([self.out("av1", "7", "FN"),
                                   self.out("av2", "7", "TP")])
        assert "7" in fused

    def test_missed_by_all(self):
        fused = fuse_observations([self.out("av1", "7", "FN"),
                                   self.out("av2", "7", "FN")])
        assert "7" not in fused
        assert fused == {"av1", "av2"}

    def test_empty(self):
        assert fuse_observations([]) == set()

    def test_commutative_and_idempotent(self, rng):
        outcomes = [self.out(f"av{i % 3}", f"v{i}",
                             "TP" if rng.random() < 0.5 else "FN")
                    for i in range(12)]
        base = fuse_observations(outcomes)
        perm = list(outcomes)
        rng.shuffle(perm)
        assert fuse_observations(perm) == base
        assert fuse_observations(outcomes + outcomes) == base

    def test_cross_frame_rejected(self):
        with pytest.raises(DataError):
            fuse_observations([
                DetectionOutcome("s", "f1", "av", "v", "TP", 1.0),
                DetectionOutcome("s", "f2", "av", "v", "TP", 1.0)])


class TestSynthScenes:
    def test_seed_reproducible(self):
        a = synth_scenes(5, 10, density=6.0)
        b = synth_scenes(5, 10, density=6.0)
        assert len(a) == len(b)
        for (fa, la), (fb, lb) in zip(a, b):
            assert fa == fb and la == lb

    def test_single_near_vehicle_is_tp(self):
        frame = make_frame([make_box("v", x=10, y=0)])
        assert synth_labels_for_frame(frame) == {"v": 0}

    def test_far_vehicle_is_fn(self):
        frame = make_frame([make_box("v", x=50, y=0)])
        assert synth_labels_for_frame(frame) == {"v": 1}

    def test_occluded_far_vehicle_is_fn(self):
        frame = make_frame([make_box("b", x=10, y=0, w=2, l=6),
                            make_box("v", x=30, y=0)])
        assert synth_labels_for_frame(frame) == {"b": 0, "v": 1}

    def test_occluded_near_vehicle_is_tp(self):
        frame = make_frame([make_box("b", x=5, y=0, w=2, l=4),
                            make_box("v", x=15, y=0)])
        assert synth_labels_for_frame(frame)["v"] == 0

    def test_labels_recomputable_from_frames(self):
        corpus = synth_scenes(11, 20, density=8.0)
        for frame, labels in corpus:
            assert synth_labels_for_frame(frame) == labels

    def test_fn_fraction_in_sane_band(self):
        corpus = synth_scenes(3, 100, density=10.0)
        labels = [v for _, lab in corpus for v in lab.values()]
        frac = sum(labels) / len(labels)
        assert 0.05 < frac < 0.95

    def test_no_overlapping_footprints(self, rng):
        from midar.geometry import boxes_overlap_bev
        corpus = synth_scenes(13, 10, density=12.0)
        for frame, _ in corpus:
            boxes = frame.vehicles
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert not boxes_overlap_bev(boxes[i], boxes[j])


class TestParamsPersistence:
    def test_forward_bit_identical_after_round_trip(self, rng, tmp_path):
        vehicles = [random_box(rng, f"v{i}") for i in range(6)]
        frame = make_frame(vehicles)
        params = model.init_params(hidden_dim=16, seed=3)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        loaded = load_params(path)
        a = model.forward(frame, params)
        b = model.forward(frame, loaded)
        assert [(p.vehicle_id, p.p_fn) for p in a] == \
            [(q.vehicle_id, q.p_fn) for q in b]

    def test_truncated_file(self, tmp_path):
        params = model.init_params(hidden_dim=8, seed=0)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        path.write_text(path.read_text()[:200])
        with pytest.raises(MalformedRecordError):
            load_params(path)

    def test_unknown_schema_version(self, tmp_path):
        params = model.init_params(hidden_dim=8, seed=0)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        rec = json.loads(path.read_text())
        rec["schema_version"] = 99
        path.write_text(json.dumps(rec))
        with pytest.raises(SchemaVersionError):
            load_params(path)

    def test_shape_mismatch(self, tmp_path):
        params = model.init_params(hidden_dim=8, seed=0)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        rec = json.loads(path.read_text())
        rec["tensors"]["w1"]["data"] = rec["tensors"]["w1"]["data"][:-3]
        path.write_text(json.dumps(rec))
        with pytest.raises(ShapeMismatchError):
            load_params(path)

    def test_hidden_dim_mismatch(self, tmp_path):
        params = model.init_params(hidden_dim=8, seed=0)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        rec = json.loads(path.read_text())
        rec["hyper"]["hidden_dim"] = 16
        path.write_text(json.dumps(rec))
        with pytest.raises(ShapeMismatchError):
            load_params(path)

    def test_missing_tensor(self, tmp_path):
        params = model.init_params(hidden_dim=8, seed=0)
        path = tmp_path / "params.json"
        serialize_params(params, path)
        rec = json.loads(path.read_text())
        del rec["tensors"]["w_r"]
        path.write_text(json.dumps(rec))
        with pytest.raises(MalformedRecordError):
            load_params(path)
