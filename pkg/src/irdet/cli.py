"""Command-line entry point: train, mine, infer, eval, and plot subcommands."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import data, metrics, pipeline
from .core import Config, IrdetError


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="flat key=value config file")
    for f in dataclasses.fields(Config):
        parser.add_argument(f"--{f.name}", type=str, default=None,
                            help=f"override config key {f.name}")


def _resolve_config(args: argparse.Namespace) -> Config:
    overrides = {}
    for f in dataclasses.fields(Config):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    if args.config:
        return Config.from_file(args.config, overrides=overrides)
    return Config.from_mapping(overrides)


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    state = pipeline.train(args.data, cfg, args.out)
    report = None
    if args.eval_data:
        report = pipeline.evaluate_dataset(args.eval_data, state)
        report.to_json(Path(args.out) / "metrics.json")
    final = state.history[-1] if state.history else {}
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{final.get('total', float('nan')):.4f}"
          + (f"; eval ap50={report.ap50:.4f}" if report else ""))
    return 0


def _cmd_mine(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out_root = Path(args.out)
    total = 0
    for seq_id in data.list_sequences(args.data):
        seq = data.Sequence(args.data, seq_id)
        mined: Dict[int, List] = {}
        for pos in range(len(seq)):
            quantity = seq.quantity(pos)
            if quantity is None or quantity <= 0:
                continue
            clip = seq.clip(pos, cfg.T)
            labels = pipeline.mine_labels(clip, quantity, cfg)
            if labels:
                mined[seq.frame_ids[pos]] = [label.box for label in labels]
                total += len(labels)
        seq_dir = out_root / seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        data.write_boxes(seq_dir / "boxes.csv", mined)
    print(f"mined {total} pseudo-labels to {out_root}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    state = pipeline.load_state(args.ckpt)
    out_root = Path(args.out)
    total = 0
    for seq_id in data.list_sequences(args.data):
        seq = data.Sequence(args.data, seq_id)
        detections = pipeline.infer_sequence(seq, state)
        rows = {fid: [(d.box, d.score) for d in dets]
                for fid, dets in detections.items() if dets}
        total += sum(len(v) for v in rows.values())
        seq_dir = out_root / seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        data.write_boxes(seq_dir / "boxes.csv", rows, scores=True)
    print(f"wrote {total} detections to {out_root}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    per_image = []
    for seq_id in data.list_sequences(args.truth):
        truth_path = Path(args.truth) / seq_id / "boxes.csv"
        truth = data.read_boxes(truth_path) if truth_path.exists() else {}
        pred_path = Path(args.pred) / seq_id / "boxes.csv"
        preds = data.read_boxes(pred_path, with_scores=True) if pred_path.exists() else {}
        frame_ids = sorted(set(truth) | set(preds))
        for fid in frame_ids:
            per_image.append((preds.get(fid, []), truth.get(fid, [])))
    report = metrics.evaluate_set(per_image, iou_thr=args.iou_thr)
    report.to_json(args.out)
    print(f"TP={report.tp} FP={report.fp} FN={report.fn} "
          f"Pr={report.precision:.4f} Re={report.recall:.4f} "
          f"F1={report.f1:.4f} AP50={report.ap50:.4f}")
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    points = []
    for path in args.metrics:
        report = metrics.MetricsReport.from_json(path)
        points.extend(report.pr_points)
    if not points:
        raise IrdetError("no PR points found in the given metrics files")
    metrics.emit_pr_curve(points, args.out, plot=args.render)
    print(f"wrote {len(points)} PR points to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irdet",
                                     description="count-supervised infrared "
                                                 "small-target detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a detector from quantity prompts")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--eval-data", default=None,
                         help="optional held-out root evaluated after training")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_mine = sub.add_parser("mine", help="dump mined pseudo-labels for inspection")
    p_mine.add_argument("--data", required=True)
    p_mine.add_argument("--out", required=True)
    _add_config_flags(p_mine)
    p_mine.set_defaults(func=_cmd_mine)

    p_infer = sub.add_parser("infer", help="run a trained checkpoint over a dataset")
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--data", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.set_defaults(func=_cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against truth boxes")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--iou-thr", type=float, default=0.5)
    p_eval.set_defaults(func=_cmd_eval)

    p_plot = sub.add_parser("plot", help="merge metrics files into a PR-curve CSV")
    p_plot.add_argument("--metrics", nargs="+", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--render", action="store_true",
                        help="also render a PNG next to the CSV")
    p_plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (IrdetError, data.DatasetError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
