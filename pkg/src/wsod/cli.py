"""Command line harness: generate, train, detect, eval, analyze.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import plots
from .config import ConfigError, RunConfig
from .data import DataError, count_histogram, generate_dataset, read_manifest, write_manifest
from .evaluate import Detection, cosine_similarity_matrix, evaluate, pca, precision_recall_curve
from .nn.checkpoint import CheckpointError
from .train import NumericError, load_model, train

log = logging.getLogger("wsod")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DETECTION_FIELDS = ["image_id", "class", "cx", "cy", "w", "h", "score"]
PROPOSAL_FIELDS = ["image_id", "cx", "cy", "w", "h", "scale", "ratio", "source"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args, overrides=()):
    pairs = list(overrides) + [tuple(s.split("=", 1)) for s in (args.set or [])]
    if any(len(p) != 2 for p in pairs):
        raise UsageError("--set expects key=value")
    if args.config:
        return RunConfig.from_file(args.config, pairs)
    return RunConfig.from_pairs(pairs)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        w.writerows(rows)
    return path


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def read_detections(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTION_FIELDS:
            raise DataError(f"{path}: expected header {','.join(DETECTION_FIELDS)}")
        try:
            return [Detection(r["image_id"], r["class"], float(r["cx"]), float(r["cy"]), float(r["w"]),
                              float(r["h"]), float(r["score"])) for r in reader]
        except ValueError as exc:
            raise DataError(f"{path}:{reader.line_num}: {exc}") from None


def cmd_generate(args):
    seed = args.seed if args.seed is not None else None
    overrides = [("data.seed", str(seed))] if seed is not None else []
    cfg = _config(args, overrides)
    n = args.n if args.n is not None else cfg["data.train_size"]
    records = generate_dataset(n, cfg["data.seed"], cfg.scene_spec(), args.prefix)
    path = write_manifest(records, args.out)
    print(f"manifest,{path}")
    print(f"scenes,{len(records)}")
    print("count,scenes")
    for count, k in count_histogram(records).items():
        print(f"{count},{k}")
    return EXIT_OK


def cmd_train(args):
    overrides = []
    if args.seed is not None:
        overrides = [("train.seed", str(args.seed)), ("model.seed", str(args.seed))]
    cfg = _config(args, overrides)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(cfg.dump())
    log.info("resolved configuration:\n%s", cfg.dump())
    records = read_manifest(args.data)
    result = train(cfg, records, args.out, eval_every=args.eval_every)
    step_keys = ["step", "epoch", "lr", "bn", "ratios", "loss", "rpn", "cls", "ref"]
    _write_csv(os.path.join(args.out, "steps.csv"), step_keys,
               [[_fmt(s[k]) for k in step_keys] for s in result.steps])
    epoch_keys = ["epoch", "loss", "count_acc", "map", "seconds"]
    _write_csv(os.path.join(args.out, "epochs.csv"), epoch_keys,
               [[_fmt(e.get(k, "")) for k in epoch_keys] for e in result.epochs])
    plots.loss_curve(result.steps, os.path.join(args.out, "loss.png"))
    print(",".join(epoch_keys))
    for e in result.epochs:
        print(",".join(_fmt(e.get(k, "")) for k in epoch_keys))
    print(f"checkpoint,{result.checkpoints[-1]}")
    return EXIT_OK


def cmd_detect(args):
    model, cfg = load_model(args.checkpoint)
    records = read_manifest(args.data)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    dets, props = model.detect([r.image for r in records], [r.id for r in records], cfg.ratios_at(float("inf")))
    elapsed = time.perf_counter() - t0
    ips = len(records) / elapsed if elapsed > 0 else float("inf")
    _write_csv(os.path.join(args.out, "detections.csv"), DETECTION_FIELDS,
               [[d.image_id, d.cls] + [f"{v:.6f}" for v in (d.cx, d.cy, d.w, d.h, d.score)] for d in dets])
    rows = []
    for rec, ps in zip(records, props):
        for box, s, r, k in zip(ps.boxes, ps.scales, ps.ratios, ps.point_index):
            b = box.scaled(model.config.stride, "image")
            row, col = ps.source_points[k]
            rows.append([rec.id] + [f"{v:.6f}" for v in (b.cx, b.cy, b.w, b.h, s * model.config.stride, r)]
                        + [f"{row}:{col}"])
    _write_csv(os.path.join(args.out, "proposals.csv"), PROPOSAL_FIELDS, rows)
    with open(os.path.join(args.out, "runtime.json"), "w") as fh:
        json.dump({"images": len(records), "seconds": elapsed, "images_per_sec": ips}, fh, sort_keys=True)
    for rec in records[:args.overlays]:
        mine = [d.corners for d in dets if d.image_id == rec.id and d.score >= args.overlay_threshold]
        plots.detections_overlay(rec.image, mine, [b.corners for b in rec.gt_boxes],
                                 os.path.join(args.out, f"overlay_{rec.id}.png"))
    print(f"images,{len(records)}")
    print(f"detections,{len(dets)}")
    print(f"proposals,{len(rows)}")
    print(f"images_per_sec,{ips:.3f}")
    return EXIT_OK


def cmd_eval(args):
    records = read_manifest(args.data)
    dets = read_detections(args.detections)
    report = evaluate(dets, records, args.iou)
    runtime = os.path.join(os.path.dirname(os.path.abspath(args.detections)), "runtime.json")
    if os.path.exists(runtime):
        with open(runtime) as fh:
            report.images_per_sec = json.load(fh)["images_per_sec"]
    rows = [[c, f"{ap:.6f}"] for c, ap in sorted(report.ap.items())]
    rows.append(["mAP", f"{report.map:.6f}"])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "report.csv"), ["class", "ap"], rows)
        curves = {c: precision_recall_curve([d for d in dets if d.cls == c], records, c, args.iou)
                  for c in report.ap}
        plots.precision_recall(curves, os.path.join(args.out, "pr.png"))
    print("class,ap")
    for row in rows:
        print(",".join(row))
    for c in report.excluded:
        print(f"excluded,{c}")
    if report.images_per_sec is not None:
        print(f"images_per_sec,{report.images_per_sec:.3f}")
    return EXIT_OK


def image_features(model, records, batch=100):
    """Per-image feature vector: the enhanced map averaged over the grid."""
    from .model import normalize_images

    feats, atts = [], []
    for s in range(0, len(records), batch):
        enhanced, att, _ = model.features(normalize_images([r.image for r in records[s:s + batch]]))
        feats.append(enhanced.mean(axis=(1, 2)))
        atts.append(att)
    return np.concatenate(feats), np.concatenate(atts)


def cmd_analyze(args):
    datasets = [(os.path.basename(os.path.dirname(os.path.abspath(p))) or p, read_manifest(p)) for p in args.data]
    models = [(os.path.splitext(os.path.basename(c))[0], load_model(c)[0]) for c in args.checkpoint]
    if sum(len(r) for _, r in datasets) < 2:
        raise DataError("feature analysis needs at least two scenes")
    os.makedirs(args.out, exist_ok=True)
    name0, model0 = models[0]
    records = [r for _, recs in datasets for r in recs]
    feats, atts = image_features(model0, records)
    coords, _, variances = pca(feats, 2)
    counts = [r.count for r in records]
    _write_csv(os.path.join(args.out, "pca.csv"), ["image_id", "count", "pc1", "pc2"],
               [[r.id, r.count, f"{a:.6f}", f"{b:.6f}"] for r, (a, b) in zip(records, coords)])
    plots.pca_scatter(coords, counts, os.path.join(args.out, "pca.png"))
    labels, means = [], []
    for mname, model in models:
        for dname, recs in datasets:
            labels.append(f"{mname}/{dname}")
            means.append(image_features(model, recs)[0].mean(axis=0))
    sim = cosine_similarity_matrix(np.array(means))
    _write_csv(os.path.join(args.out, "cosine.csv"), [""] + labels,
               [[lab] + [f"{v:.6f}" for v in row] for lab, row in zip(labels, sim)])
    plots.similarity_matrix(sim, labels, os.path.join(args.out, "cosine.png"))
    size = model0.config.image_size
    for rec, att in list(zip(records, atts))[:args.attention]:
        plots.attention_png(att, os.path.join(args.out, f"attention_{rec.id}.png"), size)
    print(f"images,{len(records)}")
    print(f"pc_variance,{variances[0]:.6g},{variances[1]:.6g}")
    print("pair,cosine")
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            print(f"{labels[i]}|{labels[j]},{sim[i, j]:.6f}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="wsod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write synthetic scenes and a manifest")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("-n", type=int, help="number of scenes (default data.train_size)")
    g.add_argument("--prefix", default="scene")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector on a manifest")
    common(t)
    t.add_argument("--data", required=True, help="manifest.jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--eval-every", type=int, default=1, help="epochs between mAP evaluations, 0 for never")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a checkpoint over a manifest's images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--overlays", type=int, default=4, help="number of overlay figures to render")
    d.add_argument("--overlay-threshold", type=float, default=0.5)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score a detections CSV against a manifest")
    e.add_argument("--detections", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="PCA and cosine similarity of pooled features")
    a.add_argument("--checkpoint", required=True, action="append", help="repeat to compare models")
    a.add_argument("--data", required=True, action="append", help="repeat to compare datasets")
    a.add_argument("--out", required=True)
    a.add_argument("--attention", type=int, default=8, help="number of attention maps to export")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required: generate, train, detect, eval or analyze")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
