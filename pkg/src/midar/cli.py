"""Command-line entry points for every pipeline stage, plus a streaming
service mode for simulator integration.

Commands: synth, ingest, build-graph, label, train, eval, apply, fuse,
fit-height, extract-dropout, serve. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import socket
import sys

from . import baselines, dataio, labeling, metrics, model
from .errors import DataError, MidarError, NumericError
from .geometry import transform_to_ego
from .rmlos import DEFAULT_HALF_EXTENT, build_rmlos

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for stochastic models (default 0)")
    common.add_argument("--range", dest="half_extent", type=float,
                        default=DEFAULT_HALF_EXTENT,
                        help="detection-range half extent in meters "
                             "(default 54)")
    common.add_argument("--threshold", type=float, default=0.4,
                        help="FN classification threshold (default 0.4)")
    return common


def build_parser() -> _Parser:
    common = _common_flags()
    parser = _Parser(prog="midar",
                     description="Occlusion-aware LiDAR detection-outcome "
                                 "modeling for traffic simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="frames output (JSONL)")
    p.add_argument("--labels", required=True, help="labels output (JSONL)")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--density", type=float, default=10.0,
                   help="mean vehicles per frame")

    p = sub.add_parser("ingest", parents=[common],
                       help="convert a trajectory CSV into a frames file")
    p.add_argument("--csv", required=True)
    p.add_argument("--mapping", required=True,
                   help="JSON column-mapping config")
    p.add_argument("--av-ids", required=True,
                   help="comma-separated vehicle ids acting as AVs")
    p.add_argument("--scene", default="traj")
    p.add_argument("--z-offset", type=float, default=1.7,
                   help="sensor mount height in meters")
    p.add_argument("--height-model", help="JSON height model (a, b, c); "
                                          "defaults to the built-in fit")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-graph", parents=[common],
                       help="dump occlusion graphs for inspection")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("label", parents=[common],
                       help="match predictions to ground truth into "
                            "TP/FN labels")
    p.add_argument("--gt", required=True, help="frames file (ground truth)")
    p.add_argument("--preds", required=True, help="predictions file")
    p.add_argument("--out", required=True)
    p.add_argument("--score-threshold", type=float, default=0.4)
    p.add_argument("--iou-car", type=float, default=0.7)
    p.add_argument("--iou-other", type=float, default=0.5)

    p = sub.add_parser("train", parents=[common],
                       help="train the detection-outcome model")
    p.add_argument("--frames", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="params output (JSON)")
    p.add_argument("--epochs", type=int, default=70)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--power-iterations", type=int, default=6)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--history", help="optional per-epoch loss output (JSON)")

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate trained params against labels")
    p.add_argument("--frames", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", help="optional metrics report (JSON)")

    p = sub.add_parser("apply", parents=[common],
                       help="run a detection model over frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--model", required=True,
                   choices=("midar", "perfect", "dropout"))
    p.add_argument("--params", help="required for --model midar")
    p.add_argument("--preset", choices=sorted(baselines.PRESETS),
                   help="dropout probability preset")
    p.add_argument("--table", help="custom dropout table (JSON)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fuse", parents=[common],
                       help="fuse per-AV outcomes into per-frame "
                            "detected sets")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--frames",
                   help="frames file naming each frame's reporting AVs; "
                        "without it AVs are inferred from the outcomes, so "
                        "an AV with zero in-range vehicles goes unseen")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-height", parents=[common],
                       help="fit the height regression from a CSV of "
                            "length,width,height samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract-dropout", parents=[common],
                       help="estimate per-bucket FN rates from outcomes")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--bounds", default="10,20,30,40,50,54",
                   help="comma-separated bucket upper bounds")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", dest="csv_out", help="optional per-bucket CSV")

    p = sub.add_parser("serve", parents=[common],
                       help="answer frame requests over stdio (or TCP)")
    p.add_argument("--params", help="params file for model=midar requests")
    p.add_argument("--default-model", default="perfect",
                   choices=("midar", "perfect", "dropout"))
    p.add_argument("--preset", choices=sorted(baselines.PRESETS),
                   default="signal-control",
                   help="default dropout preset")
    p.add_argument("--tcp", type=int, metavar="PORT",
                   help="listen on a TCP port instead of stdio")

    return parser


# -- shared helpers ----------------------------------------------------------


def _load_table(args) -> baselines.DropoutTable:
    if args.table:
        with open(args.table, encoding="utf-8") as stream:
            rec = json.load(stream)
        return baselines.DropoutTable(tuple(rec["bounds"]),
                                      tuple(rec["probabilities"]))
    preset = args.preset or "signal-control"
    return baselines.PRESETS[preset]


def _frame_outcomes(frame, model_name, *, params, table, seed, half_extent,
                    threshold):
    if model_name == "perfect":
        return baselines.perfect_detection(frame, half_extent)
    if model_name == "dropout":
        return baselines.random_dropout(frame, table, seed, half_extent)
    if model_name == "midar":
        if params is None:
            raise DataError("model 'midar' requires loaded params")
        preds = model.forward(frame, params, half_extent=half_extent,
                              threshold=threshold)
        return [dataio.DetectionOutcome(
            scene_id=frame.scene_id, frame_id=frame.frame_id,
            av_id=frame.ego.id, vehicle_id=p.vehicle_id,
            label="FN" if p.label else "TP", score=p.p_fn)
            for p in preds]
    raise DataError(f"unknown model {model_name!r}")


# -- command implementations -------------------------------------------------


def _cmd_synth(args) -> int:
    corpus = dataio.synth_scenes(args.seed, args.frames, args.density,
                                 half_extent=args.half_extent)
    dataio.write_frames([f for f, _ in corpus], args.out)
    labels = {}
    for frame, frame_labels in corpus:
        for vid, value in frame_labels.items():
            labels[(frame.scene_id, frame.frame_id, vid)] = value
    dataio.write_labels(labels, args.labels)
    n_veh = sum(len(f.vehicles) for f, _ in corpus)
    print(f"wrote {len(corpus)} frames ({n_veh} vehicles) to {args.out}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    mapping = dataio.read_column_mapping(args.mapping)
    rows = dataio.read_trajectory_csv(args.csv, mapping)
    height_model = dataio.DEFAULT_HEIGHT_MODEL
    if args.height_model:
        with open(args.height_model, encoding="utf-8") as stream:
            rec = json.load(stream)
        height_model = dataio.HeightModel(a=float(rec["a"]), b=float(rec["b"]),
                                          c=float(rec["c"]))
    av_ids = {s.strip() for s in args.av_ids.split(",") if s.strip()}
    if not av_ids:
        raise DataError("no AV ids supplied")
    frames, skipped = dataio.trajectory_to_frames(
        rows, av_ids, scene_id=args.scene, z_offset=args.z_offset,
        height_model=height_model)
    dataio.write_frames(frames, args.out)
    msg = f"wrote {len(frames)} frames to {args.out}"
    if skipped:
        msg += f" (skipped {skipped} frame/AV pairs with missing AV rows)"
    print(msg)
    return EXIT_OK


def _cmd_build_graph(args) -> int:
    frames = dataio.read_frames(args.frames)
    with open(args.out, "w", encoding="utf-8") as stream:
        for frame in frames:
            graph = build_rmlos(frame, args.half_extent)
            rec = {
                "scene_id": frame.scene_id, "frame_id": frame.frame_id,
                "nodes": list(graph.node_ids),
                "edges": sorted(list(e) for e in graph.edges),
                "features": [list(row) for row in graph.features],
            }
            stream.write(json.dumps(rec) + "\n")
    print(f"wrote {len(frames)} graphs to {args.out}")
    return EXIT_OK


def _cmd_label(args) -> int:
    frames = dataio.read_frames(args.gt)
    preds = dataio.read_predictions(args.preds)
    cfg = labeling.MatchConfig(
        score_threshold=args.score_threshold,
        iou_thresholds={cls: (args.iou_car if cls.value == "car"
                              else args.iou_other)
                        for cls in labeling.DEFAULT_IOU_THRESHOLDS})
    labels = {}
    n_fp = 0
    for frame in frames:
        frame_preds = preds.get((frame.scene_id, frame.frame_id), [])
        result = labeling.label_frame(frame.vehicles, frame_preds, cfg)
        for vid, value in result.labels.items():
            labels[(frame.scene_id, frame.frame_id, vid)] = value
        n_fp += len(result.fp_ids)
    dataio.write_labels(labels, args.out)
    n_fn = sum(labels.values())
    print(f"labeled {len(labels)} boxes: {len(labels) - n_fn} TP, "
          f"{n_fn} FN ({n_fp} FP predictions) -> {args.out}")
    return EXIT_OK


def _labels_for_frames(frames, labels):
    dataset = []
    for frame in frames:
        frame_labels = {}
        for v in frame.vehicles:
            key = (frame.scene_id, frame.frame_id, v.id)
            if key in labels:
                frame_labels[v.id] = labels[key]
        dataset.append((frame, frame_labels))
    return dataset


def _cmd_train(args) -> int:
    frames = dataio.read_frames(args.frames)
    labels = dataio.read_labels(args.labels)
    dataset = _labels_for_frames(frames, labels)
    config = model.TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        classification_threshold=args.threshold)
    params, history = model.train(
        dataset, config, hidden_dim=args.hidden_dim,
        iterations=args.power_iterations, alpha=args.alpha,
        dropout_rate=args.dropout, half_extent=args.half_extent)
    dataio.serialize_params(params, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as stream:
            json.dump({"loss": history}, stream)
    print(f"trained {args.epochs} epochs; "
          f"loss {history[0]:.4f} -> {history[-1]:.4f}; params -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    frames = dataio.read_frames(args.frames)
    labels = dataio.read_labels(args.labels)
    params = dataio.load_params(args.params)
    scores, truth = [], []
    for frame in frames:
        for pred in model.forward(frame, params,
                                  half_extent=args.half_extent,
                                  threshold=args.threshold):
            key = (frame.scene_id, frame.frame_id, pred.vehicle_id)
            if key in labels:
                scores.append(pred.p_fn)
                truth.append(labels[key])
    if not scores:
        raise DataError("no labeled predictions to evaluate")
    report = {"threshold": args.threshold, "n_samples": len(scores),
              "n_positive": int(sum(truth)),
              "auc": metrics.roc_auc(scores, truth)}
    report.update(metrics.classification_metrics(scores, truth,
                                                 args.threshold))
    for key in ("auc", "precision", "recall", "accuracy", "f1"):
        print(f"{key}: {report[key]:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as stream:
            json.dump(report, stream, indent=2)
            stream.write("\n")
    return EXIT_OK


def _cmd_apply(args) -> int:
    frames = dataio.read_frames(args.frames)
    params = dataio.load_params(args.params) if args.params else None
    table = _load_table(args) if args.model == "dropout" else None
    outcomes = []
    for frame in frames:
        outcomes.extend(_frame_outcomes(
            frame, args.model, params=params, table=table, seed=args.seed,
            half_extent=args.half_extent, threshold=args.threshold))
    dataio.write_outcomes(outcomes, args.out)
    n_fn = sum(1 for o in outcomes if o.label == "FN")
    print(f"{args.model}: {len(outcomes)} outcomes "
          f"({n_fn} FN) -> {args.out}")
    return EXIT_OK


def _cmd_fuse(args) -> int:
    outcomes = dataio.read_outcomes(args.outcomes)
    grouped: dict[tuple[str, str], list] = {}
    avs: dict[tuple[str, str], set] = {}
    if args.frames:
        for frame in dataio.read_frames(args.frames):
            key = (frame.scene_id, frame.frame_id)
            grouped.setdefault(key, [])
            avs.setdefault(key, set()).add(frame.ego.id)
    for out in outcomes:
        grouped.setdefault((out.scene_id, out.frame_id), []).append(out)
    with open(args.out, "w", encoding="utf-8") as stream:
        for (scene_id, frame_id), group in grouped.items():
            detected = dataio.fuse_observations(group)
            detected |= avs.get((scene_id, frame_id), set())
            stream.write(json.dumps({
                "scene_id": scene_id, "frame_id": frame_id,
                "detected": sorted(detected)}) + "\n")
    print(f"fused {len(grouped)} frames -> {args.out}")
    return EXIT_OK


def _cmd_fit_height(args) -> int:
    samples = []
    with open(args.samples, newline="", encoding="utf-8") as stream:
        for rec in csv.DictReader(stream):
            samples.append((float(rec["length"]), float(rec["width"]),
                            float(rec["height"])))
    height_model = dataio.fit_height_regression(samples)
    with open(args.out, "w", encoding="utf-8") as stream:
        json.dump({"a": height_model.a, "b": height_model.b,
                   "c": height_model.c}, stream)
        stream.write("\n")
    print(f"height = {height_model.a:.4f}*length + {height_model.b:.4f}*width "
          f"+ {height_model.c:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_extract_dropout(args) -> int:
    outcomes = dataio.read_outcomes(args.outcomes)
    frames = {(f.scene_id, f.frame_id, f.ego.id): f
              for f in dataio.read_frames(args.frames)}
    samples = []
    for out in outcomes:
        frame = frames.get((out.scene_id, out.frame_id, out.av_id))
        if frame is None:
            raise DataError(
                f"outcome references unknown frame "
                f"({out.scene_id}, {out.frame_id}, {out.av_id})")
        boxes = {v.id: v for v in frame.vehicles}
        if out.vehicle_id not in boxes:
            raise DataError(
                f"outcome references unknown vehicle {out.vehicle_id!r} in "
                f"frame ({out.scene_id}, {out.frame_id})")
        local = transform_to_ego(boxes[out.vehicle_id], frame.ego.pose)
        samples.append((math.hypot(local.cx, local.cy),
                        int(out.label == "FN")))
    bounds = tuple(float(s) for s in args.bounds.split(","))
    table = metrics.extract_dropout_table(samples, bounds)
    with open(args.out, "w", encoding="utf-8") as stream:
        json.dump({"bounds": list(table.bounds),
                   "probabilities": list(table.probabilities)}, stream)
        stream.write("\n")
    if args.csv_out:
        with open(args.csv_out, "w", newline="", encoding="utf-8") as stream:
            writer = csv.writer(stream)
            writer.writerow(["upper_bound_m", "p_fn"])
            for bound, p in zip(table.bounds, table.probabilities):
                writer.writerow([bound, p])
    print(f"extracted table over {len(samples)} outcomes -> {args.out}")
    return EXIT_OK


# -- streaming service -------------------------------------------------------


def _error_response(request_id, code, message) -> dict:
    return {"request_id": request_id,
            "error": {"code": code, "message": message}}


def serve_loop(in_stream, out_stream, params=None, default_model="perfect", *,
               half_extent=DEFAULT_HALF_EXTENT, threshold=0.4, seed=0,
               default_table=None) -> None:
    """Answer newline-delimited JSON frame requests until end-of-stream.

    Each request {request_id, model?, preset?, seed?, frame} yields exactly
    one response {request_id, outcomes: [...]} in request order. Malformed
    requests produce an error response and never kill the loop.
    """
    if default_table is None:
        default_table = baselines.SIGNAL_CONTROL_PRESET

    def respond(record):
        out_stream.write(json.dumps(record) + "\n")
        out_stream.flush()

    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            respond(_error_response(None, "malformed-request", str(exc)))
            continue
        if not isinstance(request, dict):
            respond(_error_response(None, "malformed-request",
                                    "request must be a JSON object"))
            continue
        request_id = request.get("request_id")
        model_name = request.get("model", default_model)
        if model_name not in ("midar", "perfect", "dropout"):
            respond(_error_response(request_id, "unknown-model",
                                    f"unknown model {model_name!r}"))
            continue
        if model_name == "midar" and params is None:
            respond(_error_response(request_id, "missing-params",
                                    "no params loaded for model 'midar'"))
            continue
        table = default_table
        if model_name == "dropout" and request.get("preset"):
            preset = request["preset"]
            if preset not in baselines.PRESETS:
                respond(_error_response(request_id, "unknown-preset",
                                        f"unknown preset {preset!r}"))
                continue
            table = baselines.PRESETS[preset]
        try:
            frame = dataio.frame_from_record(request["frame"], "<request>")
        except (KeyError, MidarError, TypeError, ValueError) as exc:
            respond(_error_response(request_id, "malformed-frame", str(exc)))
            continue
        outcomes = _frame_outcomes(
            frame, model_name, params=params, table=table,
            seed=int(request.get("seed", seed)),
            half_extent=half_extent, threshold=threshold)
        respond({"request_id": request_id,
                 "outcomes": [{"vehicle_id": o.vehicle_id, "label": o.label,
                               "score": o.score} for o in outcomes]})


def _cmd_serve(args) -> int:
    params = dataio.load_params(args.params) if args.params else None
    table = baselines.PRESETS[args.preset]
    kwargs = dict(params=params, default_model=args.default_model,
                  half_extent=args.half_extent, threshold=args.threshold,
                  seed=args.seed, default_table=table)
    if args.tcp:
        server = socket.create_server(("127.0.0.1", args.tcp))
        print(f"listening on 127.0.0.1:{args.tcp}", file=sys.stderr)
        try:
            while True:
                conn, _ = server.accept()
                with conn, conn.makefile("r", encoding="utf-8") as rd, \
                        conn.makefile("w", encoding="utf-8") as wr:
                    serve_loop(rd, wr, **kwargs)
        except KeyboardInterrupt:
            return EXIT_OK
        finally:
            server.close()
    serve_loop(sys.stdin, sys.stdout, **kwargs)
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "build-graph": _cmd_build_graph,
    "label": _cmd_label,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "apply": _cmd_apply,
    "fuse": _cmd_fuse,
    "fit-height": _cmd_fit_height,
    "extract-dropout": _cmd_extract_dropout,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"midar: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"midar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
