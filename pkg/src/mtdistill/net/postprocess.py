"""Turning raw detection outputs into scored boxes."""

from __future__ import annotations

import torch

from mtdistill.data.types import Box, BoxSet
from mtdistill.net.anchors import decode_boxes, pairwise_iou
from mtdistill.net.outputs import DetectionOutput


def greedy_nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float) -> torch.Tensor:
    """Indices kept by greedy score-descending suppression (single class)."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    suppressed = torch.zeros(boxes.shape[0], dtype=torch.bool)
    for idx in order.tolist():
        if suppressed[idx]:
            continue
        keep.append(idx)
        iou = pairwise_iou(boxes[idx : idx + 1], boxes)[0]
        suppressed |= iou > iou_thresh
    return torch.tensor(keep, dtype=torch.long)


def decode_and_nms(
    det: DetectionOutput,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
) -> list[BoxSet]:
    """Per-image: sigmoid scores, decoded boxes clipped to the chip, greedy
    per-class NMS, then the max_dets highest-scoring survivors."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    logits = det.cat_logits().detach()
    deltas = det.cat_deltas().detach()
    anchors = det.cat_anchors()
    height, width = det.image_size
    batch, _, num_classes = logits.shape

    results = []
    for b in range(batch):
        scores = torch.sigmoid(logits[b])
        boxes = decode_boxes(anchors, deltas[b])
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
        picked: list[tuple[float, Box]] = []
        for c in range(num_classes):
            mask = scores[:, c] >= score_thresh
            mask &= (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            if not mask.any():
                continue
            c_boxes = boxes[mask]
            c_scores = scores[mask, c]
            for idx in greedy_nms(c_boxes, c_scores, nms_iou).tolist():
                picked.append(
                    (
                        float(c_scores[idx]),
                        Box(
                            class_id=c,
                            x_min=float(c_boxes[idx, 0]),
                            y_min=float(c_boxes[idx, 1]),
                            x_max=float(c_boxes[idx, 2]),
                            y_max=float(c_boxes[idx, 3]),
                            score=float(c_scores[idx]),
                        ),
                    )
                )
        picked.sort(key=lambda t: -t[0])
        results.append(BoxSet([box for _, box in picked[:max_dets]]))
    return results
