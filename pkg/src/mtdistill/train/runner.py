"""Training orchestration.

The partial multi-task iteration runs one batch per task: hard loss on the
annotated head, optional teacher-driven soft/feature losses for the head the
batch has no annotations for, gradients accumulated across both passes, then
exactly one optimizer step. Teachers are frozen and never touched.
"""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

import mtdistill
from mtdistill.config import ExperimentConfig, LossConfig, save_config_snapshot
from mtdistill.data.loader import ChipDataset
from mtdistill.distill import (
    feature_mse_loss,
    pdf_feature_loss,
    pdf_weight_map,
    soft_det_loss,
    soft_seg_loss,
)
from mtdistill.errors import ConfigError, DataError, DivergenceError, NonFiniteError
from mtdistill.losses import LossValue, cross_entropy_loss, detection_loss
from mtdistill.net.anchors import assign_targets
from mtdistill.net.checkpoint import load_checkpoint, save_checkpoint
from mtdistill.net.network import (
    AdapterSet,
    Network,
    NetworkOutput,
    build_adapters,
    build_network,
)
from mtdistill.train.batches import TaskBatch, TaskLoader
from mtdistill.train.evaluate import evaluate_on_dataset, primary_metric

OTHER_TASK = {"detection": "segmentation", "segmentation": "detection"}

DEVICE_ENV = "MTDISTILL_DEVICE"


def resolve_device(config: ExperimentConfig) -> str:
    if config.device:
        return config.device
    env = os.environ.get(DEVICE_ENV)
    if env:
        return env
    return "cuda" if torch.cuda.is_available() else "cpu"


@contextmanager
def run_lock(run_dir: Path):
    """Guards a run directory against concurrent writers."""
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory {run_dir} is locked by another process (remove {lock} if stale)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


class MetricsLog:
    """Append-only json-lines stream of per-iteration records."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class TrainState:
    """Everything the iteration functions mutate."""

    student: Network
    optimizer: torch.optim.Optimizer
    loaders: dict[str, TaskLoader] = field(default_factory=dict)
    teachers: dict[str, Network] = field(default_factory=dict)
    adapters: dict[str, AdapterSet] = field(default_factory=dict)
    iteration: int = 0


def _hard_loss(out: NetworkOutput, batch: TaskBatch, loss_cfg: LossConfig) -> LossValue:
    if batch.task == "detection":
        anchors = out.detection.cat_anchors()
        assignments = [
            assign_targets(anchors, b, loss_cfg.pos_iou, loss_cfg.neg_iou) for b in batch.boxes
        ]
        return detection_loss(
            out.detection,
            assignments,
            focal_alpha=loss_cfg.focal_alpha,
            focal_gamma=loss_cfg.focal_gamma,
            l1_alpha=loss_cfg.l1_alpha,
            l1_gamma=loss_cfg.l1_gamma,
            l1_beta=loss_cfg.l1_beta,
            loc_weight=loss_cfg.loc_weight,
        )
    return cross_entropy_loss(out.segmentation.logits, batch.classes, batch.ignore)


def compute_pass_loss(
    state: TrainState, batch: TaskBatch, config: ExperimentConfig
) -> tuple[torch.Tensor, dict[str, float]]:
    """The full loss for one batch: hard term plus enabled distillation terms."""
    task = batch.task
    other = OTHER_TASK[task]
    distill_cfg = config.distill
    distilling = distill_cfg.enabled and other in state.teachers
    if distill_cfg.enabled and config.mode == "multi_task" and other not in state.teachers:
        raise ConfigError(f"distillation enabled but no teacher loaded for {other}")

    heads = [task]
    if distilling and (distill_cfg.use_soft or distill_cfg.feature_mode == "pdf"):
        heads.append(other)
    out = state.student(batch.images, heads=heads)

    hard = _hard_loss(out, batch, config.loss)
    total = hard.total
    components = {f"{task}.{k}": float(v.detach()) for k, v in hard.components.items()}

    if distilling:
        teacher = state.teachers[other]
        with torch.no_grad():
            teacher_out = teacher(batch.images, heads=[other])
        if distill_cfg.use_soft:
            if other == "segmentation":
                soft = soft_seg_loss(
                    out.segmentation.logits,
                    teacher_out.segmentation.logits,
                    distill_cfg.temperature,
                )
            else:
                soft = soft_det_loss(
                    out.detection,
                    teacher_out.detection,
                    distill_cfg.temperature,
                    distill_cfg.det_conf_floor,
                    config.loss.l1_alpha,
                    config.loss.l1_gamma,
                    config.loss.l1_beta,
                )
            total = total + distill_cfg.lambda_soft * soft.total
            components.update(
                {f"{task}.{k}": float(v.detach()) for k, v in soft.components.items()}
            )
        if distill_cfg.feature_mode != "none":
            adapters = state.adapters[other]
            if distill_cfg.feature_mode == "mse":
                feat = feature_mse_loss(out.pyramid, teacher_out.pyramid, adapters)
            else:
                level_shapes = [tuple(l.shape[-2:]) for l in teacher_out.pyramid.levels]
                student_preds = out.detection if other == "detection" else out.segmentation
                teacher_preds = (
                    teacher_out.detection if other == "detection" else teacher_out.segmentation
                )
                weights = pdf_weight_map(
                    student_preds, teacher_preds, level_shapes, distill_cfg.pdf_direction
                )
                feat = pdf_feature_loss(out.pyramid, teacher_out.pyramid, adapters, weights)
            total = total + distill_cfg.lambda_feat * feat.total
            components.update(
                {f"{task}.{k}": float(v.detach()) for k, v in feat.components.items()}
            )

    components[f"{task}.total"] = float(total.detach())
    return total, components


def _task_pass(state: TrainState, batch: TaskBatch, config: ExperimentConfig) -> dict[str, float]:
    """Forward + backward for one batch; gradients accumulate, no update."""
    try:
        total, components = compute_pass_loss(state, batch, config)
    except NonFiniteError as exc:
        raise DivergenceError(
            f"training diverged at iteration {state.iteration} on {batch.task} pass: {exc}"
        ) from exc
    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite loss at iteration {state.iteration} on {batch.task} pass: {components}"
        )
    total.backward()
    return components


def clip_gradients(state: TrainState, config: ExperimentConfig) -> None:
    """Scale accumulated gradients so their global norm stays bounded."""
    max_norm = config.schedule.grad_clip_norm
    if max_norm is None:
        return
    params = [p for group in state.optimizer.param_groups for p in group["params"]]
    torch.nn.utils.clip_grad_norm_(params, max_norm)


def partial_mtl_iteration(
    state: TrainState,
    det_batch: TaskBatch,
    seg_batch: TaskBatch,
    config: ExperimentConfig,
) -> dict[str, float]:
    """Two passes, one parameter update, iteration counter + 1."""
    if det_batch.task != "detection" or seg_batch.task != "segmentation":
        raise DataError("partial_mtl_iteration needs one detection and one segmentation batch")
    state.optimizer.zero_grad(set_to_none=True)
    components = _task_pass(state, det_batch, config)
    components.update(_task_pass(state, seg_batch, config))
    clip_gradients(state, config)
    state.optimizer.step()
    state.iteration += 1
    return components


def single_task_iteration(
    state: TrainState, batch: TaskBatch, config: ExperimentConfig
) -> dict[str, float]:
    state.optimizer.zero_grad(set_to_none=True)
    components = _task_pass(state, batch, config)
    clip_gradients(state, config)
    state.optimizer.step()
    state.iteration += 1
    return components


def _set_lr(state: TrainState, config: ExperimentConfig) -> None:
    lr = config.schedule.lr_at(state.iteration)
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def validate_experiment(config: ExperimentConfig, tasks: list[str]) -> None:
    """Fail fast, before any training starts."""
    for task in tasks:
        root = Path(config.datasets[task])
        for piece in ("dataset.yaml", "manifest.train.jsonl", "manifest.val.jsonl"):
            if not (root / piece).exists():
                raise DataError(f"datasets.{task}: missing {root / piece}")
    if config.mode == "multi_task" and config.distill.enabled:
        for task in tasks:
            teacher_task = OTHER_TASK[task]
            path = config.teachers.get(teacher_task)
            if not path:
                raise ConfigError(
                    f"distillation enabled (feature_mode={config.distill.feature_mode}, "
                    f"use_soft={config.distill.use_soft}) but teachers.{teacher_task} is not set"
                )
            if not Path(path).exists():
                raise ConfigError(f"teacher checkpoint not found: {path}")


def _load_teachers(config: ExperimentConfig, student: Network, device: str) -> TrainState:
    teachers: dict[str, Network] = {}
    adapters: dict[str, AdapterSet] = {}
    wanted = ("detection", "segmentation") if config.distill.enabled else ()
    for task in wanted:
        path = config.teachers.get(task)
        if not path:
            continue
        teacher, _meta = load_checkpoint(path, frozen=True)
        if (task == "detection" and teacher.det_head is None) or (
            task == "segmentation" and teacher.seg_head is None
        ):
            raise ConfigError(f"teacher checkpoint {path} has no {task} head")
        if task == "detection":
            if not student.spec.shares_anchor_geometry(teacher.spec):
                raise ConfigError(
                    f"teacher checkpoint {path}: anchor geometry differs from the student's"
                )
            if teacher.spec.det_classes != student.spec.det_classes:
                raise ConfigError(
                    f"teacher checkpoint {path}: {teacher.spec.det_classes} detection "
                    f"classes vs student's {student.spec.det_classes}"
                )
        if task == "segmentation" and teacher.spec.seg_classes != student.spec.seg_classes:
            raise ConfigError(
                f"teacher checkpoint {path}: {teacher.spec.seg_classes} segmentation "
                f"classes vs student's {student.spec.seg_classes}"
            )
        teacher.to(device)
        teachers[task] = teacher
        if config.distill.feature_mode != "none":
            adapters[task] = build_adapters(student.spec, teacher.spec, seed=config.seed).to(
                device
            )
    params = list(student.parameters())
    for task in sorted(adapters):
        params.extend(adapters[task].parameters())
    optimizer = torch.optim.SGD(
        params,
        lr=config.schedule.lr,
        momentum=config.schedule.momentum,
        weight_decay=config.schedule.weight_decay,
    )
    return TrainState(student=student, optimizer=optimizer, teachers=teachers, adapters=adapters)


def _save_resume_checkpoint(path: Path, state: TrainState, best: dict) -> None:
    extra = {
        "optimizer": state.optimizer.state_dict(),
        "adapters": {t: a.state_dict() for t, a in state.adapters.items()},
        "loaders": {t: list(l.state()) for t, l in state.loaders.items()},
        "best": best,
    }
    save_checkpoint(path, state.student, state.iteration, extra)


def _restore_resume_checkpoint(path: Path, state: TrainState) -> dict:
    _net, meta = load_checkpoint(path)
    state.student.load_state_dict(_net.state_dict())
    state.optimizer.load_state_dict(meta.extra["optimizer"])
    for task, blob in meta.extra["adapters"].items():
        state.adapters[task].load_state_dict(blob)
    for task, sampler_state in meta.extra["loaders"].items():
        state.loaders[task].load_state(tuple(sampler_state))
    state.iteration = meta.iteration
    return meta.extra.get("best", {})


def _environment(config: ExperimentConfig, device: str, network: Network) -> dict:
    return {
        "seed": config.seed,
        "device": device,
        "package_version": mtdistill.__version__,
        "torch_version": torch.__version__,
        "parameters": sum(p.numel() for p in network.parameters()),
    }


def _run_training(
    config: ExperimentConfig,
    spec,
    tasks: list[str],
    label: str,
    resume: bool = False,
    stop_after: Optional[int] = None,
) -> dict:
    """Shared loop behind teacher, single-task and multi-task runs.

    stop_after caps the iterations executed by this invocation (the schedule
    is unchanged); the run can be continued later with resume=True.
    """
    validate_experiment(config, tasks)
    device = resolve_device(config)
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    schedule = config.schedule

    with run_lock(run_dir):
        save_config_snapshot(config, run_dir / "config.yaml")
        log = MetricsLog(run_dir / "metrics.log")

        train_sets = {t: ChipDataset(Path(config.datasets[t]), "train") for t in tasks}
        val_sets = {t: ChipDataset(Path(config.datasets[t]), "val") for t in tasks}
        for t in tasks:
            if train_sets[t].task != t:
                raise DataError(
                    f"datasets.{t} points at a dataset whose manifest task is "
                    f"{train_sets[t].task!r}"
                )

        student = build_network(spec, config.seed).to(device)
        state = (
            _load_teachers(config, student, device)
            if config.mode == "multi_task"
            else TrainState(
                student=student,
                optimizer=torch.optim.SGD(
                    student.parameters(),
                    lr=schedule.lr,
                    momentum=schedule.momentum,
                    weight_decay=schedule.weight_decay,
                ),
            )
        )
        state.loaders = {
            t: TaskLoader(
                train_sets[t],
                schedule.batch_size,
                seed=config.seed,
                augment=schedule.augment_flips,
                device=device,
            )
            for t in tasks
        }

        best: dict[str, dict] = {}
        last_ckpt = ckpt_dir / "last.pt"
        if resume and last_ckpt.exists():
            best = _restore_resume_checkpoint(last_ckpt, state)

        t_start = time.time()
        last_eval_at = -1

        def run_eval() -> dict:
            nonlocal last_eval_at
            last_eval_at = state.iteration
            record: dict[str, dict] = {}
            for t in tasks:
                result = evaluate_on_dataset(
                    state.student, val_sets[t], config.eval, device, schedule.batch_size
                )
                metric = primary_metric(result)
                record[t] = {"primary": round(metric, 6), **result.to_jsonable()}
                prev = best.get(t)
                if prev is None or metric > prev["metric"]:
                    best[t] = {"metric": round(metric, 6), "iteration": state.iteration}
                    if len(tasks) == 1:
                        save_checkpoint(
                            ckpt_dir / "best.pt",
                            state.student,
                            state.iteration,
                            extra={"metric": metric, "task": t},
                        )
            log.append(
                {
                    "iteration": state.iteration,
                    "wall_time": round(time.time() - t_start, 3),
                    "eval": record,
                }
            )
            return record

        final_eval: dict = {}
        if state.iteration == 0:
            final_eval = run_eval()

        while state.iteration < schedule.iterations and (
            stop_after is None or state.iteration < stop_after
        ):
            _set_lr(state, config)
            if config.mode == "multi_task":
                det_batch = state.loaders["detection"].next_batch()
                seg_batch = state.loaders["segmentation"].next_batch()
                components = partial_mtl_iteration(state, det_batch, seg_batch, config)
            else:
                batch = state.loaders[tasks[0]].next_batch()
                components = single_task_iteration(state, batch, config)
            log.append(
                {
                    "iteration": state.iteration,
                    "wall_time": round(time.time() - t_start, 3),
                    "losses": {k: round(v, 6) for k, v in components.items()},
                }
            )
            if state.iteration % schedule.eval_interval == 0 or state.iteration == schedule.iterations:
                final_eval = run_eval()
            if (
                state.iteration % schedule.checkpoint_interval == 0
                or state.iteration == schedule.iterations
            ):
                _save_resume_checkpoint(last_ckpt, state, best)

        if state.iteration < schedule.iterations:
            # stopped early: leave only the resume checkpoint behind
            _save_resume_checkpoint(last_ckpt, state, best)
            return {
                "label": label,
                "completed": False,
                "iterations": state.iteration,
                "best": best,
            }

        if last_eval_at != state.iteration:
            final_eval = run_eval()
        save_checkpoint(ckpt_dir / "final.pt", state.student, state.iteration)
        report = {
            "label": label,
            "config": config.to_dict(),
            "final": final_eval,
            "best": best,
            "iterations": state.iteration,
            "environment": _environment(config, device, state.student),
        }
        tmp = run_dir / "report.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        tmp.replace(run_dir / "report.json")
        return report


def train_teacher(
    config: ExperimentConfig, resume: bool = False, stop_after: Optional[int] = None
) -> dict:
    """Supervised single-task training of the (larger) teacher network."""
    if config.task not in ("detection", "segmentation"):
        raise ConfigError("train_teacher needs task: detection or segmentation")
    if config.task not in config.datasets:
        raise ConfigError(f"train_teacher needs datasets.{config.task}")
    teacher_config = ExperimentConfig.from_dict(
        {**config.to_dict(), "mode": "single_task", "row_label": "Teacher"}
    )
    return _run_training(
        teacher_config,
        teacher_config.teacher,
        [teacher_config.task],
        "Teacher",
        resume,
        stop_after,
    )


def run_experiment(
    config: ExperimentConfig, resume: bool = False, stop_after: Optional[int] = None
) -> dict:
    """One table row: single-task baseline or (distilled) partial multi-task."""
    if config.mode == "single_task":
        return _run_training(
            config, config.student, [config.task], config.label, resume, stop_after
        )
    tasks = ["detection", "segmentation"]
    return _run_training(config, config.student, tasks, config.label, resume, stop_after)
