"""Supervised task losses.

Detection pairs a sigmoid focal classification term with a balanced-L1
localization term; both are normalized by the positive-anchor count clamped
at one. Segmentation is per-pixel softmax cross-entropy over non-ignored
pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch.nn import functional as F

from mtdistill.errors import DataError, NonFiniteError
from mtdistill.net.anchors import AnchorAssignment
from mtdistill.net.outputs import DetectionOutput


@dataclass
class LossValue:
    """A scalar loss with its named sub-terms; total is their weighted sum."""

    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)
    normalizer: float = 1.0

    def item(self) -> float:
        return float(self.total.detach())

    def scalar_components(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteError(f"{name}: non-finite values in input")


def focal_loss(
    class_logits: torch.Tensor,
    assignment: AnchorAssignment,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> LossValue:
    """FL(p_t) = -alpha_t * (1 - p_t)^gamma * log(p_t) with sigmoid per-class
    probabilities, summed over non-ignored anchors and divided by the clamped
    positive count. class_logits: (N, K)."""
    if not (0.0 < alpha < 1.0) or gamma < 0.0:
        raise ValueError(f"need alpha in (0,1) and gamma >= 0, got {alpha}, {gamma}")
    _check_finite("focal_loss", class_logits)
    labels = assignment.labels
    keep = labels != -2
    logits = class_logits[keep]
    kept_labels = labels[keep]

    targets = torch.zeros_like(logits)
    pos = kept_labels >= 0
    if pos.any():
        targets[pos, kept_labels[pos]] = 1.0

    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t).pow(gamma) * ce

    normalizer = max(1, assignment.num_positive)
    total = loss.sum() / normalizer
    return LossValue(total, {"focal": total}, normalizer=normalizer)


def balanced_l1_constants(alpha: float, gamma: float, beta: float) -> tuple[float, float]:
    """(b, c): the inner slope satisfying alpha*ln(b+1) = gamma, and the offset
    making the two pieces meet at x = beta."""
    b = math.exp(gamma / alpha) - 1.0
    c = (alpha / b) * (b * beta + 1.0) * math.log(b * beta + 1.0) - alpha * beta - gamma * beta
    return b, c


def balanced_l1_values(
    x: torch.Tensor, alpha: float = 0.5, gamma: float = 1.5, beta: float = 1.0
) -> torch.Tensor:
    """Elementwise balanced-L1 of non-negative residuals x."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    b, c = balanced_l1_constants(alpha, gamma, beta)
    inner = (alpha / b) * (b * x + 1.0) * torch.log(b * x + 1.0) - alpha * x
    outer = gamma * x + c
    return torch.where(x < beta, inner, outer)


def balanced_l1_loss(
    box_deltas: torch.Tensor,
    assignment: AnchorAssignment,
    alpha: float = 0.5,
    gamma: float = 1.5,
    beta: float = 1.0,
) -> LossValue:
    """Balanced-L1 over positive anchors' four delta coordinates, divided by
    the clamped positive count. box_deltas: (N, 4)."""
    _check_finite("balanced_l1_loss", box_deltas)
    pos = assignment.positive
    normalizer = max(1, assignment.num_positive)
    if not pos.any():
        total = box_deltas.sum() * 0.0
        return LossValue(total, {"balanced_l1": total}, normalizer=normalizer)
    residual = (box_deltas[pos] - assignment.box_targets[pos]).abs()
    total = balanced_l1_values(residual, alpha, gamma, beta).sum() / normalizer
    return LossValue(total, {"balanced_l1": total}, normalizer=normalizer)


def cross_entropy_loss(
    seg_logits: torch.Tensor,
    classes: torch.Tensor,
    ignore: torch.Tensor | None = None,
) -> LossValue:
    """Mean over non-ignored pixels of -log softmax(logits)[true class].

    seg_logits: (B, C, H, W); classes: (B, H, W) long; ignore: (B, H, W) bool.
    """
    _check_finite("cross_entropy_loss", seg_logits)
    num_classes = seg_logits.shape[1]
    if classes.shape != seg_logits.shape[:1] + seg_logits.shape[2:]:
        raise DataError(
            f"label shape {tuple(classes.shape)} does not match logits {tuple(seg_logits.shape)}"
        )
    if ignore is None:
        ignore = torch.zeros_like(classes, dtype=torch.bool)
    valid = ~ignore
    if valid.any() and int(classes[valid].max()) >= num_classes:
        raise DataError(
            f"label index {int(classes[valid].max())} out of range for {num_classes} classes"
        )
    target = classes.long().masked_fill(ignore, -1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        total = seg_logits.sum() * 0.0
    else:
        total = F.cross_entropy(seg_logits, target, ignore_index=-1, reduction="mean")
    return LossValue(total, {"cross_entropy": total}, normalizer=max(1, n_valid))


def detection_loss(
    det: DetectionOutput,
    assignments: list[AnchorAssignment],
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
    l1_alpha: float = 0.5,
    l1_gamma: float = 1.5,
    l1_beta: float = 1.0,
    loc_weight: float = 1.0,
) -> LossValue:
    """Full hard detection loss for a batch: focal + weighted balanced-L1,
    normalized by the positive count over the whole batch."""
    logits = det.cat_logits()
    deltas = det.cat_deltas()
    if len(assignments) != logits.shape[0]:
        raise DataError(f"{len(assignments)} assignments for batch of {logits.shape[0]}")
    merged = AnchorAssignment.cat(assignments)
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_deltas = deltas.reshape(-1, 4)
    cls = focal_loss(flat_logits, merged, focal_alpha, focal_gamma)
    loc = balanced_l1_loss(flat_deltas, merged, l1_alpha, l1_gamma, l1_beta)
    total = cls.total + loc_weight * loc.total
    return LossValue(
        total,
        {"det_cls": cls.total, "det_loc": loc.total},
        normalizer=cls.normalizer,
    )
