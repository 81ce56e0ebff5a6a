"""``detcal`` command-line interface.

Subcommands::

    eval       calibration report (D-ECE and ECE) for a detections file
    diagram    reliability / histogram / curve / heatmap tables as CSV
    train      train the toy detector and write a checkpoint and log
    detect     run a checkpoint on generated scenes, write COCO-style files
    ts         fit a temperature on logits and labels
    apply-ts   rescale the logits of a detections file with a fitted temperature

Exit codes: 0 success, 1 unreadable or invalid input, 2 usage error or an
empty set of detections to evaluate.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import formats
from .core import match_detections
from .formats import ParseError
from .metrics import (
    DIMENSIONS,
    BinGrid,
    compute_dece,
    confidence_histogram,
    heatmap_2d,
    property_curve,
    reliability_table,
)
from .posthoc import TemperatureModel, fit_temperature, softmax_t

log = logging.getLogger("detcal")

EXIT_INVALID = 1
EXIT_EMPTY = 2
IMAGE_SIZE = 256  # pixel size of rendered toy scenes

RELIABILITY_COLUMNS = ("bin_center", "conf", "acc", "count")
HISTOGRAM_COLUMNS = ("bin_center", "count", "avg_confidence", "avg_precision")
CURVE_COLUMNS = ("bin_center", "prec", "conf", "partial_dece", "count")
HEATMAP_COLUMNS = ("row", "col", "value")


class EmptyInput(Exception):
    """Valid input with nothing to evaluate."""


def worker_count() -> int:
    """Worker cap from ``DETCAL_THREADS``; 0 or unset means one per CPU."""
    raw = os.environ.get("DETCAL_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ParseError("DETCAL_THREADS", None, f"expected a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ParseError("DETCAL_THREADS", None, f"expected a non-negative integer, got {raw!r}")
    return n or (os.cpu_count() or 1)


def _write(path: Optional[str], text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        formats.atomic_write(path, text)


def _dims(text: str, parser: argparse.ArgumentParser) -> tuple[str, ...]:
    dims = tuple(d.strip() for d in text.split(",") if d.strip())
    bad = [d for d in dims if d not in DIMENSIONS]
    if bad or not dims:
        parser.error(f"--dims: unknown dimension(s) {bad}; choose from {','.join(DIMENSIONS)}")
    if dims[0] != "conf":
        parser.error("--dims must start with conf")
    if len(set(dims)) != len(dims):
        parser.error("--dims lists a dimension twice")
    return dims


def _matched(args):
    gt = formats.read_ground_truth(args.ground_truth)
    records = formats.read_detections(args.detections)
    dets = formats.to_detections(records, gt, args.detections, min_score=args.min_score)
    matched = match_detections(dets, gt.objects, args.iou, workers=worker_count())
    if not matched:
        raise EmptyInput("no detections left to evaluate")
    return matched


# -- eval / diagram -----------------------------------------------------------

def cmd_eval(args, parser) -> int:
    dims = _dims(args.dims, parser)
    grid = BinGrid.make(dims, conf_bins=args.conf_bins, property_bins=args.property_bins)
    report = compute_dece(_matched(args), grid, args.iou)
    _write(args.out, formats.json_text(report.to_dict()))
    return 0


def diagram_rows(kind: str, matched, n_bins: Optional[int] = None,
                 dim: Optional[str] = None, dims: Optional[Sequence[str]] = None):
    """(header, rows) of one diagram table."""
    if kind == "reliability":
        return RELIABILITY_COLUMNS, reliability_table(matched, n_bins or 10)
    if kind == "histogram":
        counts, avg_conf, avg_prec = confidence_histogram(matched, n_bins or 10)
        n = len(counts)
        return HISTOGRAM_COLUMNS, [((i + 0.5) / n, c, avg_conf, avg_prec) for i, c in enumerate(counts)]
    if kind == "curve":
        pts = property_curve(matched, dim, n_bins or 5)
        return CURVE_COLUMNS, [(p.bin_center, p.prec, p.conf, p.partial_dece, p.count) for p in pts]
    if kind == "heatmap":
        grid = heatmap_2d(matched, dims[0], dims[1], n_bins or 5, n_bins or 5)
        return HEATMAP_COLUMNS, [(i, j, v) for i, row in enumerate(grid) for j, v in enumerate(row)]
    raise ValueError(f"unknown diagram kind {kind!r}")


def cmd_diagram(args, parser) -> int:
    props = DIMENSIONS[1:]
    dims = None
    if args.kind == "curve":
        if args.dim not in props:
            parser.error(f"--kind curve needs --dim from {','.join(props)}")
    elif args.kind == "heatmap":
        dims = tuple(d.strip() for d in (args.dims or "cx,cy").split(","))
        if len(dims) != 2 or any(d not in props for d in dims) or dims[0] == dims[1]:
            parser.error(f"--kind heatmap needs --dims A,B with two distinct entries of {','.join(props)}")
    if args.bins is not None and args.bins < 1:
        parser.error("--bins must be at least 1")
    header, rows = diagram_rows(args.kind, _matched(args), args.bins, args.dim, dims)
    _write(args.out, formats.csv_text(header, rows))
    return 0


# -- training -----------------------------------------------------------------

def make_splits(seed: int, n_train: int, n_val: int, num_classes: int = 3, shift_level: float = 1.0):
    """Training set, in-domain validation set and shifted validation set."""
    from .toydet import generate_dataset

    train = generate_dataset(n_train, num_classes, 0.0, seed=[seed, 10])
    val = generate_dataset(n_val, num_classes, 0.0, seed=[seed, 11], start_id=n_train)
    shifted = generate_dataset(n_val, num_classes, shift_level, seed=[seed, 12], start_id=n_train + n_val)
    return train, val, shifted


def checkpoint_dict(model, config) -> dict:
    return {"format": "detcal-toy-detector", "config": config.to_dict(), "model": model.to_dict()}


def load_checkpoint(path: str):
    from .toydet import ToyDetector

    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return ToyDetector.from_dict(d["model"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ParseError(path, None, f"not a readable checkpoint: {exc}") from None


def cmd_train(args, parser) -> int:
    from .toydet import TrainConfig, train
    from .toydet.train import LOG_COLUMNS

    if args.mode == "mccl" and args.mc_passes < 2:
        parser.error("--mode mccl needs --mc-passes >= 2")
    if args.shift_level < 0:
        parser.error("--shift-level must be non-negative")
    if args.n_train < 1 or args.n_val < 1:
        parser.error("--n-train and --n-val must be positive")
    try:
        config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             momentum=args.momentum, beta=args.beta, mc_passes=args.mc_passes,
                             dropout=args.dropout, seed=args.seed, mode=args.mode)
    except ValueError as exc:
        parser.error(str(exc))
    tr, va, vs = make_splits(args.seed, args.n_train, args.n_val, args.num_classes, args.shift_level)
    model, history = train(config, tr, va, vs, num_classes=args.num_classes)
    formats.atomic_write(args.out_model, json.dumps(checkpoint_dict(model, config)) + "\n")
    if args.out_log:
        rows = [[r[c] for c in LOG_COLUMNS] for r in history]
        formats.atomic_write(args.out_log, formats.csv_text(LOG_COLUMNS, rows))
    last = history[-1]
    log.info("final in-domain D-ECE %s AP50 %s; shifted D-ECE %s AP50 %s",
             last["dece"], last["ap50"], last["dece_shift"], last["ap50_shift"])
    return 0


def scenes_to_coco(scenes, detections) -> tuple[list, dict]:
    """COCO-style detection records and ground truth for rendered toy scenes."""
    def bbox(b):
        x1, y1, x2, y2 = b.xyxy()
        return [x1 * IMAGE_SIZE, y1 * IMAGE_SIZE, (x2 - x1) * IMAGE_SIZE, (y2 - y1) * IMAGE_SIZE]

    recs = [{"image_id": d.image_id, "category_id": d.label, "bbox": bbox(d.box),
             "score": d.score, "logits": list(d.logits)} for d in detections]
    labels = sorted({o.label for s in scenes for o in s.objects} | {d.label for d in detections})
    gt = {
        "images": [{"id": s.image_id, "width": IMAGE_SIZE, "height": IMAGE_SIZE} for s in scenes],
        "annotations": [{"id": n, "image_id": o.image_id, "category_id": o.label, "bbox": bbox(o.box)}
                        for n, o in enumerate(o for s in scenes for o in s.objects)],
        "categories": [{"id": k, "name": f"class_{k}"} for k in labels],
    }
    return recs, gt


def cmd_detect(args, parser) -> int:
    from .toydet import generate_dataset, infer

    if args.n_scenes < 1:
        parser.error("--n-scenes must be positive")
    if args.shift_level < 0:
        parser.error("--shift-level must be non-negative")
    model = load_checkpoint(args.model)
    scenes = generate_dataset(args.n_scenes, model.num_classes, args.shift_level, seed=args.seed)
    dets = [d for s in scenes for d in infer(model, s, args.score_threshold)]
    recs, gt = scenes_to_coco(scenes, dets)
    formats.atomic_write(args.out_detections, json.dumps(recs, indent=1) + "\n")
    formats.atomic_write(args.out_ground_truth, json.dumps(gt, indent=1) + "\n")
    return 0


# -- temperature scaling --------------------------------------------------------

def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(path, None, f"cannot read file: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None


def cmd_ts(args, parser) -> int:
    logits = formats.load_json_with_lines(formats.read_text(args.logits), args.logits, depth=1)
    labels = _read_json(args.labels)
    if not isinstance(logits, list) or not logits:
        raise ParseError(args.logits, 1, "expected a non-empty JSON array of logit vectors")
    width = None
    for i, rec in enumerate(logits):
        v = rec.value
        if not (isinstance(v, list) and v and all(formats.is_number(x) for x in v)):
            raise ParseError(args.logits, rec.line, f"entry {i} must be a non-empty list of finite numbers")
        if width is not None and len(v) != width:
            raise ParseError(args.logits, rec.line, f"entry {i} has {len(v)} logits, expected {width}")
        width = len(v)
    if not (isinstance(labels, list) and all(formats.is_integer(y) for y in labels)):
        raise ParseError(args.labels, 1, "expected a JSON array of integer class indices")
    if len(labels) != len(logits):
        raise ParseError(args.labels, 1, f"{len(labels)} labels for {len(logits)} logit vectors")
    try:
        model = fit_temperature([r.value for r in logits], labels)
    except ValueError as exc:
        raise ParseError(args.labels, None, str(exc)) from None
    _write(args.out, formats.json_text(model.to_dict()))
    return 0


def cmd_apply_ts(args, parser) -> int:
    try:
        model = TemperatureModel.from_dict(_read_json(args.temperature))
    except ValueError as exc:
        raise ParseError(args.temperature, None, str(exc)) from None
    records = formats.read_detections(args.detections)
    out = []
    for i, d in enumerate(records):
        if d["logits"] is None:
            raise ParseError(args.detections, d["line"], f"detection {i} carries no logits")
        z = np.asarray(d["logits"])
        sv = softmax_t(z, model.T)
        rec = {"image_id": d["image_id"], "category_id": d["category_id"], "bbox": list(d["bbox"]),
               "score": float(sv[int(np.argmax(z))]), "logits": list(d["logits"])}
        out.append(rec)
    _write(args.out, json.dumps(out, indent=1) + "\n")
    return 0


# -- argument parsing ---------------------------------------------------------

def _match_args(p):
    p.add_argument("--detections", required=True, help="COCO-style detections JSON")
    p.add_argument("--ground-truth", required=True, help="COCO-style ground-truth JSON")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a correct detection")
    p.add_argument("--min-score", type=float, default=0.0, help="drop detections scored below this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detcal", description="Calibration tools for object detectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="D-ECE / ECE report for a detections file")
    _match_args(p)
    p.add_argument("--conf-bins", type=int, default=10)
    p.add_argument("--dims", default=",".join(DIMENSIONS), help="comma-separated grid dimensions, conf first")
    p.add_argument("--property-bins", type=int, default=5)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagram", help="diagram table as CSV")
    _match_args(p)
    p.add_argument("--kind", required=True, choices=("reliability", "histogram", "curve", "heatmap"))
    p.add_argument("--dim", help="box property for --kind curve")
    p.add_argument("--dims", help="two box properties for --kind heatmap (default cx,cy)")
    p.add_argument("--bins", type=int, help="bins per axis (10 for confidence, 5 for box properties)")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_diagram)

    p = sub.add_parser("train", help="train the toy detector")
    p.add_argument("--mode", choices=("baseline", "mccl"), default="baseline")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--mc-passes", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-level", type=float, default=0.0, help="shift of the second validation split")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--n-train", type=int, default=120)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint on generated scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--n-scenes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-level", type=float, default=0.0)
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--out-detections", required=True)
    p.add_argument("--out-ground-truth", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ts", help="fit a temperature")
    p.add_argument("--logits", required=True, help="JSON array of logit vectors")
    p.add_argument("--labels", required=True, help="JSON array of class indices")
    p.add_argument("--out", help="temperature JSON (stdout when omitted)")
    p.set_defaults(func=cmd_ts)

    p = sub.add_parser("apply-ts", help="rescale detection scores with a temperature")
    p.add_argument("--temperature", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", help="detections JSON (stdout when omitted)")
    p.set_defaults(func=cmd_apply_ts)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except EmptyInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
