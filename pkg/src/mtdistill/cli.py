"""Command-line entry points.

Commands: make-synthetic, train-teacher, train, evaluate, derive-boxes,
report. Every command exits 0 on success; on failure it prints a single
machine-parsable line `error: <code>` to stderr, then human-readable detail,
and exits 2 (config), 3 (data) or 4 (divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from mtdistill.config import EvalConfig, load_experiment_config
from mtdistill.data.boxes import mask_to_boxes
from mtdistill.data.loader import ChipDataset
from mtdistill.data.synthetic import SyntheticConfig, make_synthetic_dataset
from mtdistill.data.types import Box, BoxSet
from mtdistill.errors import ConfigError, MTDistillError
from mtdistill.evaluation import compute_map, confusion_matrix, erode_valid_mask, miou_from_confusion
from mtdistill.net.checkpoint import load_checkpoint
from mtdistill.report import collect_rows, format_table, plot_loss_curves, row_config, write_csv
from mtdistill.train.evaluate import evaluate_on_dataset
from mtdistill.train.runner import DEVICE_ENV, run_experiment, train_teacher


def _add_make_synthetic(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("make-synthetic", help="generate a synthetic shape dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--task", choices=("detection", "segmentation"), default="segmentation")
    p.add_argument("--chip-size", type=int, default=128)
    p.set_defaults(func=_cmd_make_synthetic)


def _cmd_make_synthetic(args: argparse.Namespace) -> int:
    cfg = SyntheticConfig(chip_size=args.chip_size, task=args.task)
    train, val = make_synthetic_dataset(args.seed, args.n_train, args.n_val, args.out, cfg)
    print(f"wrote {len(train)} train / {len(val)} val chips to {args.out}")
    return 0


def _add_train(sub: argparse._SubParsersAction, name: str) -> None:
    p = sub.add_parser(name, help=f"run {name.replace('-', ' ')} from a config file")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="dotted-path config override, e.g. schedule.iterations=10",
    )
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    if name == "train":
        p.add_argument(
            "--row",
            default=None,
            help='experiment-matrix row, e.g. "+ Soft + PDF" (sets mode/distill switches)',
        )
    p.set_defaults(func=_cmd_train_teacher if name == "train-teacher" else _cmd_train)


def _cmd_train_teacher(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, args.override)
    report = train_teacher(config, resume=args.resume)
    print(f"run complete: {config.run_dir()} (best: {report['best']})")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, args.override)
    if args.row:
        config = row_config(config, args.row)
    report = run_experiment(config, resume=args.resume)
    print(f"run complete: {config.run_dir()} [{report['label']}]")
    return 0


def _add_evaluate(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (omit with --oracle)")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--task", choices=("detection", "segmentation"), default=None)
    p.add_argument("--out", type=Path, default=None, help="report file (json)")
    p.add_argument("--plots", type=Path, default=None, help="directory for PR/per-class plots")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument(
        "--oracle",
        action="store_true",
        help="score the ground truth against itself (metric plumbing check)",
    )
    p.set_defaults(func=_cmd_evaluate)


def _oracle_result(dataset: ChipDataset, eval_cfg: EvalConfig):
    if dataset.task == "detection":
        gts = [dataset.load_annotation(i) for i in range(len(dataset))]
        preds = [
            BoxSet([Box(b.class_id, b.x_min, b.y_min, b.x_max, b.y_max, 1.0) for b in gt])
            for gt in gts
        ]
        return compute_map(preds, gts)
    total = np.zeros((dataset.class_count, dataset.class_count), dtype=np.int64)
    for i in range(len(dataset)):
        gt = dataset.load_annotation(i)
        valid = erode_valid_mask(gt, eval_cfg.erode_radius)
        total += confusion_matrix(gt.classes, gt.classes, valid, dataset.class_count)
    return miou_from_confusion(total)


def _cmd_evaluate(args: argparse.Namespace) -> int:
    dataset = ChipDataset(args.dataset, args.split)
    task = args.task or dataset.task
    if task != dataset.task:
        raise ConfigError(
            f"--task {task} but the dataset manifest is for {dataset.task}; "
            "point --dataset at a matching manifest"
        )
    eval_cfg = EvalConfig()
    if args.oracle:
        result = _oracle_result(dataset, eval_cfg)
        source = "oracle"
        iteration = None
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --oracle is set")
        network, meta = load_checkpoint(args.checkpoint, frozen=True)
        device = os.environ.get(DEVICE_ENV) or ("cuda" if torch.cuda.is_available() else "cpu")
        network.to(device)
        result = evaluate_on_dataset(network, dataset, eval_cfg, device, args.batch_size)
        source = str(args.checkpoint)
        iteration = meta.iteration
    report = {
        "task": task,
        "dataset": str(args.dataset),
        "split": args.split,
        "checkpoint": source,
        "iteration": iteration,
        "result": result.to_jsonable(),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    if args.plots:
        from mtdistill.report import plot_eval_result

        stem = args.out.stem if args.out else f"{task}_{args.split}"
        plot_eval_result(result, args.plots, stem)
    print(text)
    return 0


def _add_derive_boxes(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("derive-boxes", help="export mask-derived boxes for a dataset split")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", type=Path, default=None, help="default: <dataset>/<split>/boxes")
    p.add_argument("--min-area", type=int, default=None, help="default: dataset config value")
    p.set_defaults(func=_cmd_derive_boxes)


def _cmd_derive_boxes(args: argparse.Namespace) -> int:
    dataset = ChipDataset(args.dataset, args.split)
    out_dir = args.out or (args.dataset / args.split / "boxes")
    out_dir.mkdir(parents=True, exist_ok=True)
    min_area = args.min_area if args.min_area is not None else dataset.info.min_area
    n_boxes = 0
    for i, entry in enumerate(dataset.manifest.entries):
        labels = dataset.load_labels(i)
        boxes = mask_to_boxes(labels, dataset.info.detection_classes, min_area)
        name = Path(entry.image).stem
        with open(out_dir / f"{name}.json", "w") as fh:
            json.dump(boxes.to_jsonable(), fh)
        n_boxes += len(boxes)
    print(f"wrote boxes for {len(dataset)} chips ({n_boxes} boxes) to {out_dir}")
    return 0


def _add_report(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("report", help="comparison table + loss plots for finished runs")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None, help="directory for table.csv/table.txt/plots")
    p.set_defaults(func=_cmd_report)


def _cmd_report(args: argparse.Namespace) -> int:
    rows = collect_rows(args.run_dirs)
    table = format_table(rows)
    print(table, end="")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table.txt").write_text(table)
        write_csv(rows, args.out / "table.csv")
        plots = plot_loss_curves(args.run_dirs, args.out / "plots")
        print(f"wrote {args.out / 'table.csv'} and {len(plots)} plot(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtdistill",
        description="Partial multi-task training of detection + segmentation with distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_make_synthetic(sub)
    _add_train(sub, "train-teacher")
    _add_train(sub, "train")
    _add_evaluate(sub)
    _add_derive_boxes(sub)
    _add_report(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MTDistillError as exc:
        print(f"error: {exc.code}", file=sys.stderr)
        print(f"  {exc}", file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
