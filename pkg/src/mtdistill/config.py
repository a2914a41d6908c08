"""Experiment configuration: YAML files, dotted-path overrides, validation.

One ExperimentConfig describes one table row: network specs, datasets,
distillation switches, schedule and seed. The file snapshot is copied into
the run directory so every report can be reproduced from it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from mtdistill.distill import DistillConfig
from mtdistill.errors import ConfigError
from mtdistill.net.spec import NetworkSpec

MODES = ("single_task", "multi_task")


@dataclass
class ScheduleConfig:
    iterations: int = 2000
    batch_size: int = 4
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1.0e-4
    decay_factor: float = 0.1
    decay_milestones: tuple[float, ...] = (2 / 3, 8 / 9)
    eval_interval: int = 500
    checkpoint_interval: int = 500
    augment_flips: bool = True
    grad_clip_norm: Optional[float] = 10.0

    def __post_init__(self) -> None:
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("schedule.iterations and schedule.batch_size must be positive")
        if self.optimizer not in ("sgd",):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.decay_milestones = tuple(float(m) for m in self.decay_milestones)

    def lr_at(self, iteration: int) -> float:
        decays = sum(1 for m in self.decay_milestones if iteration >= int(m * self.iterations))
        return self.lr * self.decay_factor**decays


@dataclass
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    l1_alpha: float = 0.5
    l1_gamma: float = 1.5
    l1_beta: float = 1.0
    loc_weight: float = 1.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self) -> None:
        if not (0.0 <= self.neg_iou <= self.pos_iou <= 1.0):
            raise ConfigError("need 0 <= loss.neg_iou <= loss.pos_iou <= 1")


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 100
    erode_radius: int = 3


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "multi_task"
    seed: int = 0
    output_dir: str = "runs"
    row_label: Optional[str] = None
    task: Optional[str] = None  # single_task mode only
    student: NetworkSpec = field(default_factory=NetworkSpec)
    teacher: NetworkSpec = field(
        default_factory=lambda: NetworkSpec(backbone="resnet50", neck="pafpn")
    )
    datasets: dict[str, str] = field(default_factory=dict)
    teachers: dict[str, str] = field(default_factory=dict)
    distill: DistillConfig = field(default_factory=DistillConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    device: Optional[str] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "single_task":
            if self.task not in ("detection", "segmentation"):
                raise ConfigError("single_task mode needs task: detection or segmentation")
            if self.task not in self.datasets:
                raise ConfigError(f"single_task mode needs datasets.{self.task}")
        else:
            for task in ("detection", "segmentation"):
                if task not in self.datasets:
                    raise ConfigError(f"multi_task mode needs datasets.{task}")

    @property
    def label(self) -> str:
        if self.row_label:
            return self.row_label
        return self.distill.row_label(self.mode)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "row_label": self.row_label,
            "task": self.task,
            "student": self.student.to_dict(),
            "teacher": self.teacher.to_dict(),
            "datasets": dict(self.datasets),
            "teachers": dict(self.teachers),
            "distill": self.distill.to_dict(),
            "schedule": {
                "iterations": self.schedule.iterations,
                "batch_size": self.schedule.batch_size,
                "optimizer": self.schedule.optimizer,
                "lr": self.schedule.lr,
                "momentum": self.schedule.momentum,
                "weight_decay": self.schedule.weight_decay,
                "decay_factor": self.schedule.decay_factor,
                "decay_milestones": list(self.schedule.decay_milestones),
                "eval_interval": self.schedule.eval_interval,
                "checkpoint_interval": self.schedule.checkpoint_interval,
                "augment_flips": self.schedule.augment_flips,
                "grad_clip_norm": self.schedule.grad_clip_norm,
            },
            "loss": {
                "focal_alpha": self.loss.focal_alpha,
                "focal_gamma": self.loss.focal_gamma,
                "l1_alpha": self.loss.l1_alpha,
                "l1_gamma": self.loss.l1_gamma,
                "l1_beta": self.loss.l1_beta,
                "loc_weight": self.loss.loc_weight,
                "pos_iou": self.loss.pos_iou,
                "neg_iou": self.loss.neg_iou,
            },
            "eval": {
                "score_thresh": self.eval.score_thresh,
                "nms_iou": self.eval.nms_iou,
                "max_dets": self.eval.max_dets,
                "erode_radius": self.eval.erode_radius,
            },
            "device": self.device,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ExperimentConfig":
        rec = copy.deepcopy(rec)
        unknown = set(rec) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")

        def sub(key: str, klass: type) -> Any:
            if key not in rec:
                return None
            raw = rec.pop(key)
            if not isinstance(raw, dict):
                raise ConfigError(f"{key}: expected a mapping, got {type(raw).__name__}")
            try:
                if hasattr(klass, "from_dict"):
                    return klass.from_dict(raw)
                known = set(klass.__dataclass_fields__)  # type: ignore[attr-defined]
                bad = set(raw) - known
                if bad:
                    raise ConfigError(f"{key}: unknown keys {sorted(bad)}")
                return klass(**raw)
            except TypeError as exc:
                raise ConfigError(f"{key}: {exc}") from exc

        kwargs: dict[str, Any] = {}
        for key, klass in (
            ("student", NetworkSpec),
            ("teacher", NetworkSpec),
            ("distill", DistillConfig),
            ("schedule", ScheduleConfig),
            ("loss", LossConfig),
            ("eval", EvalConfig),
        ):
            value = sub(key, klass)
            if value is not None:
                kwargs[key] = value
        kwargs.update(rec)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like schedule.iterations=10 to a raw dict."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path.to.key=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = _parse_scalar(value)
    return out


def load_experiment_config(path: Path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return ExperimentConfig.from_dict(raw)


def save_config_snapshot(config: ExperimentConfig, path: Path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
    tmp.replace(path)
