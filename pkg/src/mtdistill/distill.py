"""Knowledge-distillation losses.

Logit level: temperature-scaled KL from a frozen teacher's predictions to the
student's, for both heads. Feature level: MSE between adapted student pyramid
features and teacher features, either uniform (mse) or weighted per location
by teacher-student prediction (dis)agreement (pdf).

Teacher tensors are detached here no matter what the caller did, so no
gradient can reach teacher parameters through any of these losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch.nn import functional as F

from mtdistill.errors import ConfigError, DataError
from mtdistill.losses import LossValue, balanced_l1_values
from mtdistill.net.network import AdapterSet
from mtdistill.net.outputs import DetectionOutput, PyramidFeatures, SegmentationOutput

FEATURE_MODES = ("none", "mse", "pdf")
PDF_DIRECTIONS = ("weight_agreement", "weight_disagreement")


@dataclass
class DistillConfig:
    """Ablation switches for one experiment row."""

    use_soft: bool = False
    feature_mode: str = "none"
    temperature: float = 1.0
    lambda_soft: float = 1.0
    lambda_feat: float = 1.0
    pdf_direction: str = "weight_agreement"
    det_conf_floor: float = 0.3

    def __post_init__(self) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.pdf_direction not in PDF_DIRECTIONS:
            raise ConfigError(f"pdf_direction must be one of {PDF_DIRECTIONS}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lambda_soft < 0 or self.lambda_feat < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0.0 <= self.det_conf_floor <= 1.0):
            raise ConfigError("det_conf_floor must lie in [0, 1]")

    @property
    def enabled(self) -> bool:
        return self.use_soft or self.feature_mode != "none"

    def row_label(self, mode: str) -> str:
        """Experiment-table row name for this switch combination."""
        if mode == "single_task":
            return "Single-task"
        parts = []
        if self.use_soft:
            parts.append("Soft")
        if self.feature_mode == "mse":
            parts.append("MSE")
        elif self.feature_mode == "pdf":
            parts.append("PDF")
        if not parts:
            return "Multi-task"
        return "+ " + " + ".join(parts)

    def to_dict(self) -> dict:
        return {
            "use_soft": self.use_soft,
            "feature_mode": self.feature_mode,
            "temperature": self.temperature,
            "lambda_soft": self.lambda_soft,
            "lambda_feat": self.lambda_feat,
            "pdf_direction": self.pdf_direction,
            "det_conf_floor": self.det_conf_floor,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "DistillConfig":
        unknown = set(rec) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**rec)


@dataclass
class WeightMap:
    """Per pyramid level: (B, H_l, W_l) weights in [0, 1]."""

    levels: list[torch.Tensor]

    def __post_init__(self) -> None:
        for w in self.levels:
            if not torch.isfinite(w).all():
                raise DataError("weight map contains non-finite values")
            if w.numel() and (float(w.min()) < 0.0 or float(w.max()) > 1.0):
                raise DataError("weight map values must lie in [0, 1]")


def soft_seg_loss(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 1.0
) -> LossValue:
    """T^2-scaled KL(teacher softmax at T || student softmax at T), averaged
    over pixels. Logits: (B, C, H, W)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise DataError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    teacher_logits = teacher_logits.detach()
    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=1)
    p_t = log_p_t.exp()
    kl = (p_t * (log_p_t - log_p_s)).sum(dim=1)
    total = temperature**2 * kl.mean()
    return LossValue(total, {"soft_seg": total})


def soft_det_loss(
    student: DetectionOutput,
    teacher: DetectionOutput,
    temperature: float = 1.0,
    conf_floor: float = 0.3,
    l1_alpha: float = 0.5,
    l1_gamma: float = 1.5,
    l1_beta: float = 1.0,
) -> LossValue:
    """Binary KL between temperature-scaled sigmoids over every anchor-class
    cell, plus balanced-L1 between box deltas on anchors the teacher is
    confident about (max class probability at natural scale >= conf_floor)."""
    if not student.same_geometry(teacher):
        raise DataError("student and teacher anchor geometry differ")
    s = student.cat_logits()
    t = teacher.cat_logits().detach()
    st = s / temperature
    tt = t / temperature
    p_t = torch.sigmoid(tt)
    kl = p_t * (F.logsigmoid(tt) - F.logsigmoid(st)) + (1 - p_t) * (
        F.logsigmoid(-tt) - F.logsigmoid(-st)
    )
    cls_total = temperature**2 * kl.mean()

    s_deltas = student.cat_deltas()
    t_deltas = teacher.cat_deltas().detach()
    confident = torch.sigmoid(t).max(dim=-1).values >= conf_floor
    n_confident = int(confident.sum())
    if n_confident == 0:
        reg_total = s_deltas.sum() * 0.0
    else:
        residual = (s_deltas - t_deltas).abs()[confident]
        reg_total = balanced_l1_values(residual, l1_alpha, l1_gamma, l1_beta).sum() / n_confident
    total = cls_total + reg_total
    return LossValue(
        total,
        {"soft_det_cls": cls_total, "soft_det_reg": reg_total},
        normalizer=max(1, n_confident),
    )


def feature_mse_loss(
    student_feats: PyramidFeatures,
    teacher_feats: PyramidFeatures,
    adapters: AdapterSet,
) -> LossValue:
    """Mean over levels of elementwise MSE between adapted student features
    and (detached) teacher features."""
    if len(student_feats) != len(teacher_feats):
        raise DataError("pyramid level counts differ")
    adapted = adapters(student_feats)
    per_level = []
    for a, t in zip(adapted, teacher_feats.levels):
        t = t.detach()
        if a.shape != t.shape:
            raise DataError(f"feature shapes differ after adaptation: {tuple(a.shape)} vs {tuple(t.shape)}")
        per_level.append(F.mse_loss(a, t))
    total = torch.stack(per_level).mean()
    return LossValue(total, {"feat_mse": total})


def _normalize_per_image(d: torch.Tensor) -> torch.Tensor:
    """Min-max normalize (B, H, W) per image; an all-equal image maps to zeros."""
    flat = d.reshape(d.shape[0], -1)
    lo = flat.min(dim=1).values.reshape(-1, 1, 1)
    hi = flat.max(dim=1).values.reshape(-1, 1, 1)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (d - lo) / safe
    return torch.where(span.expand_as(d) > 0, out, torch.zeros_like(d))


def pdf_weight_map(
    student_preds: DetectionOutput | SegmentationOutput,
    teacher_preds: DetectionOutput | SegmentationOutput,
    level_shapes: Sequence[tuple[int, int]],
    direction: str = "weight_agreement",
) -> WeightMap:
    """Per-location weights from teacher-student prediction disagreement.

    Disagreement d is the mean absolute probability difference per location
    (sigmoid over anchor-class cells for detection; softmax per pixel,
    max-pooled down to each level, for segmentation), min-max normalized per
    level and image. weight_agreement returns 1 - d, weight_disagreement d.
    """
    if direction not in PDF_DIRECTIONS:
        raise ValueError(f"direction must be one of {PDF_DIRECTIONS}")
    if isinstance(student_preds, DetectionOutput) != isinstance(teacher_preds, DetectionOutput):
        raise DataError("predictions come from different head types")

    levels: list[torch.Tensor] = []
    if isinstance(student_preds, DetectionOutput):
        if not student_preds.same_geometry(teacher_preds):
            raise DataError("detection outputs have mismatched anchor geometry")
        for s, t, (h, w) in zip(
            student_preds.class_logits, teacher_preds.class_logits, level_shapes
        ):
            diff = (torch.sigmoid(s) - torch.sigmoid(t.detach())).abs()
            batch = diff.shape[0]
            per_anchor = diff.mean(dim=-1)  # (B, H*W*A)
            d = per_anchor.reshape(batch, h, w, -1).mean(dim=-1)
            levels.append(d)
    else:
        s_logits = student_preds.logits
        t_logits = teacher_preds.logits.detach()
        if s_logits.shape != t_logits.shape:
            raise DataError("segmentation logits differ in shape")
        diff = (F.softmax(s_logits, dim=1) - F.softmax(t_logits, dim=1)).abs().mean(dim=1)
        height, width = diff.shape[-2:]
        for h, w in level_shapes:
            if h == height and w == width:
                levels.append(diff)
                continue
            if height % h != 0 or width % w != 0:
                raise DataError(
                    f"cannot pool {height}x{width} disagreement exactly to {h}x{w}"
                )
            levels.append(
                F.max_pool2d(
                    diff.unsqueeze(1), kernel_size=(height // h, width // w)
                ).squeeze(1)
            )

    normalized = [_normalize_per_image(d.detach()) for d in levels]
    if direction == "weight_agreement":
        normalized = [1.0 - d for d in normalized]
    return WeightMap(normalized)


def pdf_feature_loss(
    student_feats: PyramidFeatures,
    teacher_feats: PyramidFeatures,
    adapters: AdapterSet,
    weights: WeightMap,
) -> LossValue:
    """Disagreement-weighted feature imitation.

    Per level: sum over locations of w * ||adapted - teacher||^2 divided by
    (sum of w * channels); a level whose weights are all zero contributes 0.
    """
    if len(student_feats) != len(weights.levels):
        raise DataError("weight map level count differs from feature pyramid")
    adapted = adapters(student_feats)
    per_level = []
    for a, t, w in zip(adapted, teacher_feats.levels, weights.levels):
        t = t.detach()
        if a.shape != t.shape:
            raise DataError(f"feature shapes differ after adaptation: {tuple(a.shape)} vs {tuple(t.shape)}")
        if w.shape != (a.shape[0],) + a.shape[2:]:
            raise DataError(f"weight shape {tuple(w.shape)} does not match features {tuple(a.shape)}")
        channels = a.shape[1]
        sq = (a - t).pow(2).sum(dim=1)
        denom = w.sum() * channels
        if float(denom) <= 0.0:
            per_level.append(sq.sum() * 0.0)
        else:
            per_level.append((w * sq).sum() / denom)
    total = torch.stack(per_level).mean()
    return LossValue(total, {"feat_pdf": total})
