"""Command-line entry point: ``mmsf gen-data | cluster-anchors | train | eval | predict``.

Exit status is 0 on success, 2 for usage or validation problems and 1 for
runtime failures.
"""

from __future__ import annotations

import os
import sys

# The BLAS thread cap must be in the environment before numpy loads.
_THREADS = os.environ.get("MMSF_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .anchors import kmeanspp_cluster
from .config import RunConfig, coerce, patch_config_file
from .evalmetrics import evaluate, validate_report
from .geometry import Box
from .phantom import PhantomParams, load_split, read_manifest, read_pgm, write_dataset, write_pgm
from .train import TrainingDiverged, detect_samples, load_model, split_train_val, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
PRED_VALUE, GT_VALUE = 255, 200


class UsageError(Exception):
    """Bad arguments or inputs; reported with exit status 2."""


# ---------------------------------------------------------------- helpers

def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _lambda_list(text: str) -> list[float]:
    try:
        values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("lambda values must be positive")
    return values


def resolve_config(args) -> RunConfig:
    """Config file first, then ``--set key=value`` pairs, then dedicated flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        changes[key] = coerce(key, value)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("regression", "regression")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "no_sfe", False):
        changes["sfe"] = False
    if getattr(args, "data", None):
        changes["data_dir"] = str(args.data)
    if getattr(args, "out", None):
        changes["out_dir"] = str(args.out)
    return cfg.replace(**changes)


def _load_samples(data_dir, split: str):
    try:
        manifest = read_manifest(data_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc))
    if split not in manifest.splits:
        raise UsageError(f"dataset {data_dir} has no split {split!r} (have {sorted(manifest.splits)})")
    return load_split(data_dir, split)


def burn_boxes(image: np.ndarray, boxes, value: int) -> np.ndarray:
    """Draw one-pixel rectangle outlines into a copy of a uint8 image."""
    out = image.copy()
    h, w = out.shape
    for b in boxes:
        x0, y0, x1, y1 = b.as_tuple() if isinstance(b, Box) else b
        c0 = int(np.clip(np.floor(x0), 0, w - 1))
        r0 = int(np.clip(np.floor(y0), 0, h - 1))
        c1 = int(np.clip(np.ceil(x1) - 1, 0, w - 1))
        r1 = int(np.clip(np.ceil(y1) - 1, 0, h - 1))
        out[r0, c0:c1 + 1] = value
        out[r1, c0:c1 + 1] = value
        out[r0:r1 + 1, c0] = value
        out[r0:r1 + 1, c1] = value
    return out


def _write_overlay(path: Path, image: np.ndarray, preds, gts=()) -> None:
    img8 = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    img8 = burn_boxes(img8, gts, GT_VALUE)
    img8 = burn_boxes(img8, preds, PRED_VALUE)
    write_pgm(path, img8 / 255.0)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    params = PhantomParams(image_size=args.image_size)
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = write_dataset(args.train, args.test, args.seed, args.out, params)
    total = sum(len(r) for r in manifest.splits.values())
    print(f"wrote {total} records to {args.out} (seed {args.seed})")
    for split, recs in manifest.splits.items():
        mibc = sum(r["class_id"] for r in recs)
        print(f"  {split}: {len(recs)} images, {mibc} MIBC / {len(recs) - mibc} NMIBC")
    return EXIT_OK


def cmd_cluster_anchors(args) -> int:
    samples = _load_samples(args.data, args.split)
    result = kmeanspp_cluster([s[1] for s in samples], args.k, seed=args.seed)
    ratios = sorted(round(r, 3) for r in result.ratios)
    print(f"k-means++ on {len(samples)} boxes (k={args.k}, seed={args.seed}, {result.iterations} iterations)")
    for i, (w, h) in enumerate(result.centroids):
        count = int((result.assignment == i).sum())
        print(f"  cluster {i}: w={w:.2f} h={h:.2f} ratio={w / h:.3f} members={count}")
    if result.duplicate_centroids:
        print("  note: duplicate centroids (fewer distinct shapes than k)")
    print("ratios: " + ", ".join(f"{r:g}" for r in ratios))
    if args.patch_config:
        patch_config_file(args.patch_config, anchor_ratios=tuple(ratios))
        print(f"patched anchor_ratios in {args.patch_config}")
    return EXIT_OK


def _train_one(cfg: RunConfig, samples, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    trn, val = split_train_val(samples, cfg.val_fraction)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(entry):
        print(entry.line(), flush=True)
        with log_path.open("a") as fh:
            fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")

    cpu0, wall0 = time.process_time(), time.perf_counter()
    result = train(cfg, trn, val, out_dir=out_dir, on_epoch=on_epoch)
    timing = {"cpu_seconds": time.process_time() - cpu0, "wall_seconds": time.perf_counter() - wall0}
    (out_dir / "timing.json").write_text(json.dumps(timing, sort_keys=True) + "\n")
    print(f"best epoch {result.best_epoch}; checkpoint {out_dir / 'best.ckpt'}; "
          f"{timing['cpu_seconds'] / 60:.1f} CPU-min")
    return result


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = _load_samples(cfg.data_dir, "train")
    out = Path(cfg.out_dir)
    lambdas = args.lam or [cfg.lam]
    if len(lambdas) == 1:
        _train_one(cfg.replace(lam=lambdas[0]), samples, out)
        return EXIT_OK
    test = _load_samples(cfg.data_dir, "test")
    rows = []
    for lam in lambdas:
        print(f"== lambda {lam:g}")
        sub = cfg.replace(lam=lam, out_dir=str(out / f"lambda_{lam:g}"))
        result = _train_one(sub, samples, Path(sub.out_dir))
        dets, gts = detect_samples(result.model, test)
        rep = evaluate(dets, gts)
        miou = rep.mean_iou or 0.0
        rows.append({"lambda": lam, "map": rep.map, "mean_iou": rep.mean_iou,
                     "weighted_map": rep.map * miou, "ap": {str(k): v for k, v in rep.ap.items()}})
    best = max(rows, key=lambda r: r["weighted_map"])
    table = format_sweep_table(rows, best["lambda"])
    print(table, end="")
    (out / "lambda_sweep.txt").write_text(table)
    (out / "lambda_sweep.json").write_text(json.dumps({"rows": rows, "best_lambda": best["lambda"]},
                                                      indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def format_sweep_table(rows, best_lambda) -> str:
    lines = ["lambda   mAP@0.5   mean_IoU   mAP*IoU", "-" * 38]
    for r in rows:
        miou = "   absent" if r["mean_iou"] is None else f"{r['mean_iou']:9.4f}"
        mark = "  <- best" if r["lambda"] == best_lambda else ""
        lines.append(f"{r['lambda']:6g}   {r['map']:7.4f}  {miou}   {r['weighted_map']:7.4f}{mark}")
    return "\n".join(lines) + "\n"


def _load_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint(args.checkpoint)
    data = args.data or cfg.data_dir
    samples = _load_samples(data, args.split)
    dets, gts = detect_samples(model, samples)
    rep = evaluate(dets, gts)
    print(rep.to_text(), end="")
    doc = json.loads(rep.to_json(extra={"split": args.split, "num_images": len(samples),
                                         "config": cfg.to_text()}))
    validate_report(doc)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.overlay_dir:
        out = Path(args.overlay_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (img, box, _) in enumerate(samples):
            preds = [d.box for d in dets if d.image_id == i and d.score >= args.overlay_score]
            _write_overlay(out / f"{i:05d}.pgm", img, preds, [box])
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    out = Path(args.overlay_dir) if args.overlay_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"image not found: {path}")
        try:
            img = read_pgm(path).astype(np.float64) / 255.0
        except ValueError as exc:
            raise UsageError(str(exc))
        dets = model.detect(img[None])[0]
        for d in dets:
            print(json.dumps({"image": str(path), "box": [round(v, 2) for v in d.box.as_tuple()],
                              "score": round(d.score, 4), "class_id": d.class_id}, sort_keys=True))
        if out:
            _write_overlay(out / path.name, img, [d.box for d in dets if d.score >= args.overlay_score])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsf", description="Phantom bladder tumor detector.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a phantom train/test dataset")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--train", type=_positive_int, default=500)
    g.add_argument("--test", type=_positive_int, default=100)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("cluster-anchors", help="k-means++ over gt box shapes")
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="train")
    c.add_argument("--k", type=_positive_int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--patch-config", help="config file whose anchor_ratios are rewritten")
    c.set_defaults(func=cmd_cluster_anchors)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--regression", choices=("smooth_l1", "iou"))
    t.add_argument("--no-sfe", action="store_true", help="single C4 feature map, no top-down fusion")
    t.add_argument("--lambda", dest="lam", type=_lambda_list,
                   help="localization weight; a comma list runs a sweep, e.g. 1,2,5")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--json", help="write the report here")
    e.add_argument("--overlay-dir")
    e.add_argument("--overlay-score", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="detect on PGM images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("images", nargs="+")
    r.add_argument("--overlay-dir")
    r.add_argument("--overlay-score", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"mmsf: error: MMSF_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"mmsf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"mmsf {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as exc:
        print(f"mmsf {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
