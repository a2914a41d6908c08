"""Cross-run comparison: the experiment matrix, aligned tables, CSV, plots."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from mtdistill.config import ExperimentConfig
from mtdistill.errors import ConfigError, DataError

# canonical experiment-table rows, in presentation order
MATRIX_ROWS = [
    "Single-task",
    "Multi-task",
    "+ Soft",
    "+ MSE",
    "+ PDF",
    "+ Soft + MSE",
    "+ Soft + PDF",
]
_ROW_ORDER = {label: i for i, label in enumerate(["Teacher"] + MATRIX_ROWS)}

_ROW_SWITCHES: dict[str, dict] = {
    "Single-task": {"mode": "single_task", "use_soft": False, "feature_mode": "none"},
    "Multi-task": {"mode": "multi_task", "use_soft": False, "feature_mode": "none"},
    "+ Soft": {"mode": "multi_task", "use_soft": True, "feature_mode": "none"},
    "+ MSE": {"mode": "multi_task", "use_soft": False, "feature_mode": "mse"},
    "+ PDF": {"mode": "multi_task", "use_soft": False, "feature_mode": "pdf"},
    "+ Soft + MSE": {"mode": "multi_task", "use_soft": True, "feature_mode": "mse"},
    "+ Soft + PDF": {"mode": "multi_task", "use_soft": True, "feature_mode": "pdf"},
}


def _slug(label: str) -> str:
    return label.replace("+", "").strip().lower().replace(" ", "_").replace("-", "_").replace("__", "_")


def row_config(base: ExperimentConfig, label: str) -> ExperimentConfig:
    """Derive one matrix row's config from a base config."""
    if label not in _ROW_SWITCHES:
        raise ConfigError(f"unknown matrix row {label!r}, expected one of {MATRIX_ROWS}")
    switches = _ROW_SWITCHES[label]
    raw = copy.deepcopy(base.to_dict())
    raw["mode"] = switches["mode"]
    raw["distill"]["use_soft"] = switches["use_soft"]
    raw["distill"]["feature_mode"] = switches["feature_mode"]
    raw["row_label"] = label
    raw["name"] = f"{base.name}_{_slug(label)}"
    if switches["mode"] == "single_task" and not raw.get("task"):
        raw["task"] = "detection"
    return ExperimentConfig.from_dict(raw)


def matrix_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    """The seven-row experiment matrix derived from one base config."""
    return [row_config(base, label) for label in MATRIX_ROWS]


@dataclass
class ReportRow:
    label: str
    name: str
    detection_map: Optional[float]
    segmentation_miou: Optional[float]
    tasks: tuple[str, ...]
    run_dir: Path


def read_report(run_dir: Path) -> ReportRow:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise DataError(f"no report.json in {run_dir}")
    with open(path) as fh:
        report = json.load(fh)
    final = report.get("final", {})
    det = final.get("detection", {}).get("primary")
    seg = final.get("segmentation", {}).get("primary")
    return ReportRow(
        label=report.get("label", Path(run_dir).name),
        name=report.get("config", {}).get("name", Path(run_dir).name),
        detection_map=det,
        segmentation_miou=seg,
        tasks=tuple(sorted(final.keys())),
        run_dir=Path(run_dir),
    )


def collect_rows(run_dirs: list[Path]) -> list[ReportRow]:
    rows = [read_report(d) for d in run_dirs]
    rows.sort(key=lambda r: (_ROW_ORDER.get(r.label, len(_ROW_ORDER)), r.name))
    return rows


def _cell(value: Optional[float]) -> str:
    return f"{value:.4f}" if value is not None else "-"


def format_table(rows: list[ReportRow]) -> str:
    """Aligned text table: one row per run, one column per task metric."""
    header = ("Training", "Detection mAP", "Segmentation mIoU")
    body = [(r.label, _cell(r.detection_map), _cell(r.segmentation_miou)) for r in rows]
    task_sets = {r.tasks for r in rows}
    notes = []
    if len(task_sets) > 1:
        notes = [
            f"note: task sets differ across rows: {r.label} covers {', '.join(r.tasks) or 'none'}"
            for r in rows
        ]
    widths = [max(len(col[i]) for col in [header] + body) for i in range(3)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines + notes) + "\n"


def write_csv(rows: list[ReportRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "name", "detection_map", "segmentation_miou"])
        for r in rows:
            writer.writerow(
                [
                    r.label,
                    r.name,
                    "" if r.detection_map is None else f"{r.detection_map:.6f}",
                    "" if r.segmentation_miou is None else f"{r.segmentation_miou:.6f}",
                ]
            )


def read_csv(path: Path) -> list[tuple[str, str, Optional[float], Optional[float]]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for label, name, det, seg in reader:
            out.append(
                (label, name, float(det) if det else None, float(seg) if seg else None)
            )
    return out


def plot_eval_result(result, out_dir: Path, stem: str) -> list[Path]:
    """PR curves (detection) or per-class bars from one evaluation result."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from mtdistill.evaluation import DetectionEvalResult

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(result, DetectionEvalResult):
        fig, ax = plt.subplots(figsize=(6, 5))
        for class_id in result.classes:
            key = (class_id, 0.5)
            if key not in result.pr_curves:
                continue
            recalls, precisions = result.pr_curves[key]
            ax.plot(recalls, precisions, label=f"class {class_id} @0.50")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=8)
        ax.set_title(f"{stem}: PR at IoU 0.50 (mAP {result.mean_ap:.3f})")
        path = out_dir / f"{stem}_pr.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(6, 4))
        values = [result.class_ap(c) for c in result.classes]
        ax.bar([str(c) for c in result.classes], values)
        ax.set_ylabel("AP averaged over thresholds")
        ax.set_ylim(0, 1)
        ax.set_title(stem)
        path = out_dir / f"{stem}_per_class.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    else:
        fig, ax = plt.subplots(figsize=(6, 4))
        classes = sorted(result.iou)
        ax.bar([str(c) for c in classes], [result.iou[c] for c in classes])
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1)
        ax.set_title(f"{stem}: per-class IoU (mIoU {result.mean_iou:.3f})")
        path = out_dir / f"{stem}_per_class.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def plot_loss_curves(run_dirs: list[Path], out_dir: Path) -> list[Path]:
    """One PNG per run with its loss components over iterations."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for run_dir in run_dirs:
        log_path = Path(run_dir) / "metrics.log"
        if not log_path.exists():
            continue
        series: dict[str, tuple[list[int], list[float]]] = {}
        with open(log_path) as fh:
            for line in fh:
                rec = json.loads(line)
                if "losses" not in rec:
                    continue
                for key, value in rec["losses"].items():
                    xs, ys = series.setdefault(key, ([], []))
                    xs.append(rec["iteration"])
                    ys.append(value)
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(8, 5))
        for key in sorted(series):
            xs, ys = series[key]
            ax.plot(xs, ys, label=key, linewidth=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(Path(run_dir).name)
        ax.legend(fontsize=7)
        path = out_dir / f"{Path(run_dir).name}_loss.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
