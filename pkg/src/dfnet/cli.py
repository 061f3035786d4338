"""Command-line entry point: gen-data, train, infer, eval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dfnet import config as run_config
from dfnet.data import KINDS, gen_synthetic, load_dataset, read_heatmap, read_png, write_heatmap, write_png
from dfnet.errors import DFNetError
from dfnet.inference import InferConfig, binarize, infer_group
from dfnet.metrics import evaluate
from dfnet.model import DFNet, load_checkpoint
from dfnet.trainer import train_stage

log = logging.getLogger("dfnet")


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def prune_instances(mask: np.ndarray, labels: np.ndarray, min_overlap: float = 0.5) -> np.ndarray:
    """Keep only predicted foreground covered by instances that are mostly predicted foreground."""
    keep = np.zeros(mask.shape, dtype=bool)
    for k in np.unique(labels):
        if k == 0:
            continue
        inst = labels == k
        if mask[inst].mean() >= min_overlap:
            keep |= inst
    return (mask.astype(bool) & keep).astype(np.uint8)


def cmd_gen_data(args) -> int:
    ds = gen_synthetic(args.kind, args.count, args.size, args.seed, args.out_dir)
    frames = sum(len(g) for g in ds.groups)
    print(f"wrote {len(ds.groups)} {args.kind} groups ({frames} frames) to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = run_config.load(args.config) if args.config else run_config.RunConfig()
    if args.stage:
        cfg.train.stage = args.stage
    if args.iters is not None:
        cfg.train.max_iter = args.iters
    dataset = load_dataset(args.data_dir)
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        model = DFNet(cfg.model)
    result = train_stage(cfg.train, model, dataset, checkpoint_path=args.out, trace_path=args.trace, progress=True)
    final = result.trace[-1][2] if result.trace else float("nan")
    print(f"{cfg.train.stage}: {len(result.trace)} iterations, final loss {final:.5f}, checkpoint {args.out}")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    base = run_config.load(args.config).infer if args.config else InferConfig()
    cfg = InferConfig(
        scales=_floats(args.scales) if args.scales else base.scales,
        mirror=base.mirror if args.mirror is None else args.mirror,
        threshold=args.threshold if args.threshold is not None else base.threshold,
        n_in=args.n_in if args.n_in is not None else base.n_in,
        use_crf=base.use_crf and not args.no_crf,
        resize_before_average=base.resize_before_average,
    )
    dataset = load_dataset(args.frames_dir)
    out = Path(args.out_dir)
    for g in dataset.groups:
        heats = infer_group(g.frames, model, cfg)
        for i, h in enumerate(heats):
            mask = binarize(h, cfg.threshold)
            if args.instances:
                labels = read_png(Path(args.instances) / g.name / f"{i:05d}.png")
                mask = prune_instances(mask, labels)
            write_heatmap(out / g.name / "heatmaps" / f"{i:05d}.png", h)
            write_png(out / g.name / "masks" / f"{i:05d}.png", (mask * 255).astype(np.uint8))
        print(f"{g.name}: {len(heats)} frames")
    return 0


def cmd_eval(args) -> int:
    gt = load_dataset(args.gt_dir)
    pred_root = Path(args.pred_dir)
    heats, masks = [], []
    for g in gt.groups:
        for i, m in enumerate(g.masks):
            path = pred_root / g.name / "heatmaps" / f"{i:05d}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing prediction {path}")
            heats.append(read_heatmap(path))
            masks.append(m)
    report = evaluate(heats, masks, threshold=args.threshold)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out.with_suffix(".pr.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_index", "precision", "recall"])
        for i, (p, r) in enumerate(report.pr_curve, 1):
            w.writerow([i, repr(p), repr(r)])
    print(f"J {report.j_mean:.4f}  F {report.boundary_f:.4f}  MAE {report.mae:.4f}  maxF {report.max_f:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfnet", description="Video object segmentation with discriminative features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", help="run configuration file")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--stage", choices=["static_pretrain", "video", "coseg"])
    t.add_argument("--iters", type=int)
    t.add_argument("--trace", help="loss trace CSV")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write heatmaps and masks for every group")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--frames-dir", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--config", help="run configuration file (infer.* keys)")
    i.add_argument("--scales", help="comma separated, e.g. 0.75,1,1.25")
    i.add_argument("--mirror", action=argparse.BooleanOptionalAction, default=None)
    i.add_argument("--n-in", type=int)
    i.add_argument("--threshold", type=float)
    i.add_argument("--no-crf", action="store_true")
    i.add_argument("--instances", help="optional instance label PNGs (<group>/NNNNN.png) for pruning")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted heatmaps against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DFNetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
