from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
import torch

from mtdistill.config import ExperimentConfig, ScheduleConfig
from mtdistill.data.loader import ChipDataset
from mtdistill.distill import DistillConfig
from mtdistill.errors import ConfigError
from mtdistill.net.network import build_adapters, build_network, freeze_network
from mtdistill.train.batches import TaskLoader
from mtdistill.train.runner import (
    TrainState,
    clip_gradients,
    compute_pass_loss,
    partial_mtl_iteration,
    run_experiment,
    train_teacher,
)
from conftest import tiny_spec


def _digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _config(synth_root: Path, tmp_path: Path, **kwargs) -> ExperimentConfig:
    base = dict(
        name="unit",
        mode="multi_task",
        seed=1,
        output_dir=str(tmp_path / "runs"),
        student=tiny_spec(),
        teacher=tiny_spec(neck="pafpn", neck_channels=48),
        datasets={
            "detection": str(synth_root / "det"),
            "segmentation": str(synth_root / "seg"),
        },
        schedule=ScheduleConfig(
            iterations=4, batch_size=2, eval_interval=1000, checkpoint_interval=1000
        ),
    )
    base.update(kwargs)
    return ExperimentConfig(**base)


def _make_state(config: ExperimentConfig, with_teachers: bool = False) -> TrainState:
    student = build_network(config.student, config.seed)
    teachers = {}
    adapters = {}
    if with_teachers:
        for task in ("detection", "segmentation"):
            teachers[task] = freeze_network(build_network(config.teacher, config.seed + 10))
            if config.distill.feature_mode != "none":
                adapters[task] = build_adapters(config.student, config.teacher, config.seed)
    params = list(student.parameters())
    for task in sorted(adapters):
        params.extend(adapters[task].parameters())
    optimizer = torch.optim.SGD(params, lr=0.01, momentum=0.9)
    loaders = {
        t: TaskLoader(
            ChipDataset(Path(config.datasets[t]), "train"),
            config.schedule.batch_size,
            seed=config.seed,
        )
        for t in ("detection", "segmentation")
    }
    return TrainState(
        student=student, optimizer=optimizer, loaders=loaders, teachers=teachers, adapters=adapters
    )


def _next_batches(state: TrainState):
    return state.loaders["detection"].next_batch(), state.loaders["segmentation"].next_batch()


def _max_rel_param_diff(a: torch.nn.Module, b: torch.nn.Module) -> float:
    worst = 0.0
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        diff = (pa - pb).abs().max()
        scale = pa.abs().max().clamp(min=1e-8)
        worst = max(worst, float(diff / scale))
    return worst


# ---------------------------------------------------------------------------
# accumulation contracts


@pytest.mark.parametrize("distill", [None, DistillConfig(use_soft=True, feature_mode="pdf")])
def test_accumulated_update_equals_summed_single_backward(synth_root, tmp_path, distill):
    kwargs = {"distill": distill} if distill else {}
    config = _config(synth_root, tmp_path, **kwargs)

    state_a = _make_state(config, with_teachers=bool(distill))
    state_b = _make_state(config, with_teachers=bool(distill))
    assert _digest(state_a.student) == _digest(state_b.student)

    det_a, seg_a = _next_batches(state_a)
    det_b, seg_b = _next_batches(state_b)

    partial_mtl_iteration(state_a, det_a, seg_a, config)

    state_b.optimizer.zero_grad(set_to_none=True)
    total_det, _ = compute_pass_loss(state_b, det_b, config)
    total_seg, _ = compute_pass_loss(state_b, seg_b, config)
    (total_det + total_seg).backward()
    clip_gradients(state_b, config)
    state_b.optimizer.step()

    assert _max_rel_param_diff(state_a.student, state_b.student) < 1e-5


def test_exactly_one_update_per_two_passes(synth_root, tmp_path):
    config = _config(synth_root, tmp_path)
    state = _make_state(config)
    steps = []
    original = state.optimizer.step

    def counting_step(*args, **kwargs):
        steps.append(state.iteration)
        return original(*args, **kwargs)

    state.optimizer.step = counting_step
    for _ in range(3):
        det, seg = _next_batches(state)
        partial_mtl_iteration(state, det, seg, config)
    assert len(steps) == 3
    assert state.iteration == 3


def test_zero_lambdas_match_hard_only_update(synth_root, tmp_path):
    distill = DistillConfig(use_soft=True, feature_mode="pdf", lambda_soft=0.0, lambda_feat=0.0)
    config_zero = _config(synth_root, tmp_path, distill=distill)
    config_off = _config(synth_root, tmp_path)

    state_zero = _make_state(config_zero, with_teachers=True)
    state_off = _make_state(config_off, with_teachers=False)

    det_z, seg_z = _next_batches(state_zero)
    det_o, seg_o = _next_batches(state_off)
    partial_mtl_iteration(state_zero, det_z, seg_z, config_zero)
    partial_mtl_iteration(state_off, det_o, seg_o, config_off)

    assert _max_rel_param_diff(state_zero.student, state_off.student) < 1e-6


def test_teachers_bit_identical_after_ten_iterations(synth_root, tmp_path):
    config = _config(
        synth_root, tmp_path, distill=DistillConfig(use_soft=True, feature_mode="mse")
    )
    state = _make_state(config, with_teachers=True)
    before = {t: _digest(net) for t, net in state.teachers.items()}
    for _ in range(10):
        det, seg = _next_batches(state)
        partial_mtl_iteration(state, det, seg, config)
    after = {t: _digest(net) for t, net in state.teachers.items()}
    assert before == after


def test_task_head_isolation_in_vanilla_mode(synth_root, tmp_path):
    config = _config(synth_root, tmp_path)
    state = _make_state(config)
    det, seg = _next_batches(state)

    state.optimizer.zero_grad(set_to_none=True)
    total, _ = compute_pass_loss(state, det, config)
    total.backward()
    assert all(p.grad is None for p in state.student.seg_head.parameters())
    assert any(
        p.grad is not None and p.grad.abs().sum() > 0
        for p in state.student.det_head.parameters()
    )

    state.optimizer.zero_grad(set_to_none=True)
    total, _ = compute_pass_loss(state, seg, config)
    total.backward()
    assert all(p.grad is None for p in state.student.det_head.parameters())
    assert any(
        p.grad is not None and p.grad.abs().sum() > 0
        for p in state.student.seg_head.parameters()
    )


def test_missing_teacher_with_distill_raises(synth_root, tmp_path):
    config = _config(synth_root, tmp_path, distill=DistillConfig(use_soft=True))
    state = _make_state(config, with_teachers=False)
    det, seg = _next_batches(state)
    with pytest.raises(ConfigError):
        partial_mtl_iteration(state, det, seg, config)


# ---------------------------------------------------------------------------
# full runs: determinism, resume, reports


def _loss_records(run_dir: Path) -> list[dict]:
    records = []
    with open(run_dir / "metrics.log") as fh:
        for line in fh:
            rec = json.loads(line)
            if "losses" in rec:
                records.append({"iteration": rec["iteration"], **rec["losses"]})
    return records


def test_run_experiment_deterministic(synth_root, tmp_path):
    base = dict(
        schedule=ScheduleConfig(iterations=3, batch_size=2, eval_interval=3, checkpoint_interval=3)
    )
    config_a = _config(synth_root, tmp_path, name="det_a", **base)
    config_b = _config(synth_root, tmp_path, name="det_b", **base)
    report_a = run_experiment(config_a)
    report_b = run_experiment(config_b)
    assert _loss_records(config_a.run_dir()) == _loss_records(config_b.run_dir())
    assert report_a["final"] == report_b["final"]
    ckpt_a = (config_a.run_dir() / "checkpoints/final.pt").read_bytes()
    ckpt_b = (config_b.run_dir() / "checkpoints/final.pt").read_bytes()
    assert hashlib.sha256(ckpt_a).hexdigest() == hashlib.sha256(ckpt_b).hexdigest()


def test_resume_matches_uninterrupted_run(synth_root, tmp_path):
    straight = _config(
        synth_root,
        tmp_path,
        name="straight",
        schedule=ScheduleConfig(iterations=6, batch_size=2, eval_interval=6, checkpoint_interval=3),
    )
    report_straight = run_experiment(straight)

    resumed = _config(
        synth_root,
        tmp_path,
        name="resumed",
        schedule=ScheduleConfig(iterations=6, batch_size=2, eval_interval=6, checkpoint_interval=3),
    )
    partial = run_experiment(resumed, stop_after=3)
    assert partial["completed"] is False and partial["iterations"] == 3
    report_resumed = run_experiment(resumed, resume=True)

    assert report_resumed["final"] == report_straight["final"]
    straight_losses = {r["iteration"]: r for r in _loss_records(straight.run_dir())}
    resumed_losses = {r["iteration"]: r for r in _loss_records(resumed.run_dir())}
    for it in range(3, 6):
        assert resumed_losses[it] == straight_losses[it]


def test_single_task_report_covers_one_task(synth_root, tmp_path):
    config = _config(
        synth_root,
        tmp_path,
        name="single",
        mode="single_task",
        task="segmentation",
        schedule=ScheduleConfig(iterations=2, batch_size=2, eval_interval=2, checkpoint_interval=2),
    )
    report = run_experiment(config)
    assert report["label"] == "Single-task"
    assert set(report["final"].keys()) == {"segmentation"}


def test_distilled_run_logs_all_loss_streams(synth_root, tmp_path):
    teacher_cfg = _config(
        synth_root,
        tmp_path,
        name="seg_teacher",
        mode="single_task",
        task="segmentation",
        schedule=ScheduleConfig(iterations=2, batch_size=2, eval_interval=2, checkpoint_interval=2),
    )
    train_teacher(teacher_cfg)
    det_teacher_cfg = _config(
        synth_root,
        tmp_path,
        name="det_teacher",
        mode="single_task",
        task="detection",
        schedule=ScheduleConfig(iterations=2, batch_size=2, eval_interval=2, checkpoint_interval=2),
    )
    train_teacher(det_teacher_cfg)

    config = _config(
        synth_root,
        tmp_path,
        name="softpdf",
        distill=DistillConfig(use_soft=True, feature_mode="pdf"),
        teachers={
            "segmentation": str(teacher_cfg.run_dir() / "checkpoints/best.pt"),
            "detection": str(det_teacher_cfg.run_dir() / "checkpoints/best.pt"),
        },
        schedule=ScheduleConfig(iterations=2, batch_size=2, eval_interval=2, checkpoint_interval=2),
    )
    report = run_experiment(config)
    assert report["label"] == "+ Soft + PDF"
    records = _loss_records(config.run_dir())
    keys = set().union(*records)
    assert {"detection.det_cls", "detection.soft_seg", "detection.feat_pdf"} <= keys
    assert {"segmentation.cross_entropy", "segmentation.soft_det_cls", "segmentation.feat_pdf"} <= keys
    for rec in records:
        for key, value in rec.items():
            assert value == value and abs(value) < 1e9  # finite


def test_teacher_improves_over_untrained_and_loss_trends_down(synth_root, tmp_path):
    config = _config(
        synth_root,
        tmp_path,
        name="trend",
        mode="single_task",
        task="segmentation",
        schedule=ScheduleConfig(
            iterations=300, batch_size=2, eval_interval=300, checkpoint_interval=300
        ),
    )
    report = train_teacher(config)

    evals, losses = [], []
    with open(config.run_dir() / "metrics.log") as fh:
        for line in fh:
            rec = json.loads(line)
            if "eval" in rec:
                evals.append((rec["iteration"], rec["eval"]["segmentation"]["primary"]))
            else:
                losses.append(rec["losses"]["segmentation.total"])
    untrained = dict(evals)[0]
    assert report["best"]["segmentation"]["metric"] > untrained

    first, last = losses[:100], losses[-100:]
    assert sum(last) / len(last) < sum(first) / len(first)


def test_teacher_training_deterministic_checkpoints(synth_root, tmp_path):
    cfg_a = _config(
        synth_root,
        tmp_path,
        name="ta",
        mode="single_task",
        task="segmentation",
        schedule=ScheduleConfig(iterations=3, batch_size=2, eval_interval=3, checkpoint_interval=3),
    )
    cfg_b = _config(
        synth_root,
        tmp_path,
        name="tb",
        mode="single_task",
        task="segmentation",
        schedule=ScheduleConfig(iterations=3, batch_size=2, eval_interval=3, checkpoint_interval=3),
    )
    train_teacher(cfg_a)
    train_teacher(cfg_b)
    bytes_a = (cfg_a.run_dir() / "checkpoints/final.pt").read_bytes()
    bytes_b = (cfg_b.run_dir() / "checkpoints/final.pt").read_bytes()
    assert hashlib.sha256(bytes_a).hexdigest() == hashlib.sha256(bytes_b).hexdigest()
