"""Anchor generation, IoU matching and box delta coding.

Conventions, shared by every consumer:
  - anchors at one location enumerate ratio-major: (r0,s0), (r0,s1), ...
  - an anchor of area (base * scale)^2 and ratio r = height/width has
    width = base * scale / sqrt(r) and height = base * scale * sqrt(r)
  - deltas are (dx, dy, dw, dh): center offsets normalized by anchor size,
    log size ratios
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from mtdistill.data.types import BoxSet

NEGATIVE = -1
IGNORED = -2

# caps exp() in decoding, consistent with clamping deltas of huge boxes
_MAX_LOG_SIZE = math.log(1000.0)


def location_anchors(
    stride: int,
    scales: Sequence[float],
    ratios: Sequence[float],
    base_factor: float,
) -> torch.Tensor:
    """(A, 4) anchor offsets around a location center, A = len(scales)*len(ratios)."""
    out = []
    for ratio in ratios:
        for scale in scales:
            size = base_factor * stride * scale
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            out.append((-w / 2, -h / 2, w / 2, h / 2))
    return torch.tensor(out, dtype=torch.float32)


def generate_anchors(
    level_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    scales: Sequence[float],
    ratios: Sequence[float],
    base_factor: float = 4.0,
) -> list[torch.Tensor]:
    """Anchors for every pyramid level.

    Level i gives (H_i * W_i * A, 4), locations row-major, centers at
    ((col + 0.5) * stride, (row + 0.5) * stride) in input pixels.
    """
    out = []
    for (h, w), stride in zip(level_shapes, strides):
        base = location_anchors(stride, scales, ratios, base_factor)
        ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
        xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        out.append((centers + base.reshape(1, -1, 4)).reshape(-1, 4))
    return out


def pairwise_iou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """(N, M) IoU matrix for xyxy boxes."""
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    lt = torch.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = torch.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def encode_boxes(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return torch.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=1
    )


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = torch.exp(deltas[:, 2].clamp(max=_MAX_LOG_SIZE)) * aw
    h = torch.exp(deltas[:, 3].clamp(max=_MAX_LOG_SIZE)) * ah
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


@dataclass
class AnchorAssignment:
    """Per-anchor training targets.

    labels: (N,) long; class index for positives, -1 negative, -2 ignored.
    box_targets: (N, 4) encoded deltas, zero outside positives.
    matched_gt: (N,) long; GT index for positives, -1 elsewhere.
    """

    labels: torch.Tensor
    box_targets: torch.Tensor
    matched_gt: torch.Tensor

    @property
    def positive(self) -> torch.Tensor:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def cat(cls, parts: Sequence["AnchorAssignment"]) -> "AnchorAssignment":
        return cls(
            labels=torch.cat([p.labels for p in parts]),
            box_targets=torch.cat([p.box_targets for p in parts]),
            matched_gt=torch.cat([p.matched_gt for p in parts]),
        )


def assign_targets(
    anchors: torch.Tensor,
    gt: BoxSet,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> AnchorAssignment:
    """Threshold assignment with best-anchor rescue.

    An anchor is positive when its IoU with some GT reaches pos_iou, or when
    it is the best anchor of a GT (so no GT with any overlap goes unmatched);
    negative when its best IoU is below neg_iou; ignored in between.
    """
    if not (0.0 <= neg_iou <= pos_iou <= 1.0):
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    n = anchors.shape[0]
    device = anchors.device
    labels = torch.full((n,), NEGATIVE, dtype=torch.long, device=device)
    box_targets = torch.zeros((n, 4), dtype=anchors.dtype, device=device)
    matched = torch.full((n,), -1, dtype=torch.long, device=device)
    if len(gt) == 0:
        return AnchorAssignment(labels, box_targets, matched)

    gt_boxes = torch.as_tensor(gt.coords(), dtype=anchors.dtype, device=device)
    gt_classes = torch.as_tensor(gt.class_ids(), dtype=torch.long, device=device)
    iou = pairwise_iou(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)

    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORED
    positive = best_iou >= pos_iou
    labels[positive] = gt_classes[best_gt[positive]]
    matched[positive] = best_gt[positive]

    # rescue: each GT's single best anchor becomes positive for it
    gt_best_iou, gt_best_anchor = iou.max(dim=0)
    for g in range(gt_boxes.shape[0]):
        if gt_best_iou[g] > 0:
            a = int(gt_best_anchor[g])
            labels[a] = gt_classes[g]
            matched[a] = g

    pos = labels >= 0
    if pos.any():
        box_targets[pos] = encode_boxes(anchors[pos], gt_boxes[matched[pos]])
    return AnchorAssignment(labels, box_targets, matched)
