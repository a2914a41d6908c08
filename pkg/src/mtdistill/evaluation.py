"""Metrics: multi-threshold VOC-style mAP and eroded-boundary mIoU.

AP uses all-point interpolation (area under the monotonized precision-recall
curve); score ties break by input order. mIoU counts only pixels whose whole
disc neighborhood shares one class, removing uncertain boundary pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from mtdistill.data.types import BoxSet, LabelMap
from mtdistill.errors import DataError

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class DetectionEvalResult:
    """AP per (class, IoU threshold) for classes present in the ground truth,
    their unweighted mean, and the PR curves behind them."""

    ap: dict[tuple[int, float], float]
    mean_ap: float
    classes: list[int]
    thresholds: tuple[float, ...]
    pr_curves: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)

    def class_ap(self, class_id: int) -> float:
        vals = [v for (c, _), v in self.ap.items() if c == class_id]
        return float(np.mean(vals)) if vals else float("nan")

    def to_jsonable(self) -> dict:
        return {
            "mAP": round(self.mean_ap, 6),
            "thresholds": list(self.thresholds),
            "classes": self.classes,
            "ap": {f"{c}@{t:.2f}": round(v, 6) for (c, t), v in sorted(self.ap.items())},
        }


@dataclass
class SegmentationEvalResult:
    iou: dict[int, float]
    mean_iou: float
    valid_pixels: int
    confusion: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def to_jsonable(self) -> dict:
        return {
            "mIoU": round(self.mean_iou, 6),
            "iou": {str(c): round(v, 6) for c, v in sorted(self.iou.items())},
            "valid_pixels": int(self.valid_pixels),
        }


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU matrix for xyxy float boxes."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the PR curve with precision made monotonically
    non-increasing from the right (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recalls, [recalls[-1] if recalls.size else 0.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def compute_map(
    predictions: Sequence[BoxSet],
    ground_truths: Sequence[BoxSet],
    thresholds: Sequence[float] = MAP_THRESHOLDS,
) -> DetectionEvalResult:
    """Greedy score-descending matching per class and IoU threshold.

    A prediction matches the unmatched same-image GT of its class with the
    highest IoU, provided that IoU reaches the threshold; otherwise it is a
    false positive. Classes never appearing in the ground truth are excluded
    from the mean.
    """
    if len(predictions) != len(ground_truths):
        raise DataError(
            f"{len(predictions)} prediction sets vs {len(ground_truths)} ground-truth sets"
        )
    for img_preds in predictions:
        for b in img_preds:
            if b.score is None:
                raise DataError("prediction without a score")

    gt_classes = sorted({b.class_id for gts in ground_truths for b in gts})
    ap: dict[tuple[int, float], float] = {}
    curves: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = {}

    for class_id in gt_classes:
        # flat list of this class's predictions: (score, image, box), stable order
        preds = [
            (b.score, img, np.array(b.as_tuple()))
            for img, img_preds in enumerate(predictions)
            for b in img_preds
            if b.class_id == class_id
        ]
        order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
        gts_per_image = [
            np.array([b.as_tuple() for b in gts if b.class_id == class_id]).reshape(-1, 4)
            for gts in ground_truths
        ]
        n_gt = sum(g.shape[0] for g in gts_per_image)

        for thresh in thresholds:
            matched = [np.zeros(g.shape[0], dtype=bool) for g in gts_per_image]
            tp = np.zeros(len(order))
            for rank, pred_idx in enumerate(order):
                _, img, box = preds[pred_idx]
                gts = gts_per_image[img]
                if gts.shape[0] == 0:
                    continue
                ious = box_iou_matrix(box[None, :], gts)[0]
                ious[matched[img]] = -1.0
                best = int(np.argmax(ious))
                if ious[best] >= thresh:
                    matched[img][best] = True
                    tp[rank] = 1.0
            cum_tp = np.cumsum(tp)
            cum_fp = np.cumsum(1.0 - tp)
            recalls = cum_tp / n_gt if n_gt else np.zeros_like(cum_tp)
            precisions = np.where(cum_tp + cum_fp > 0, cum_tp / (cum_tp + cum_fp), 0.0)
            ap[(class_id, thresh)] = average_precision(recalls, precisions) if n_gt else 0.0
            curves[(class_id, thresh)] = (recalls, precisions)

    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return DetectionEvalResult(
        ap=ap,
        mean_ap=mean_ap,
        classes=gt_classes,
        thresholds=tuple(thresholds),
        pr_curves=curves,
    )


def disc_element(radius: int) -> np.ndarray:
    """Boolean disc: offsets within Euclidean distance radius of the center."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return yy**2 + xx**2 <= radius**2


def erode_valid_mask(gt: LabelMap, radius: int = 3) -> np.ndarray:
    """Pixels whose whole disc neighborhood shares their class, none ignored.

    Neighborhood parts outside the raster do not invalidate border pixels.
    radius 0 keeps exactly the non-ignored pixels.
    """
    if radius == 0:
        return ~gt.ignore
    disc = disc_element(radius)
    valid = np.zeros(gt.shape, dtype=bool)
    for class_id in np.unique(gt.classes[~gt.ignore]):
        mask = (gt.classes == class_id) & ~gt.ignore
        eroded = ndimage.binary_erosion(mask, structure=disc, border_value=1)
        valid |= eroded & mask
    return valid


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, class_count: int
) -> np.ndarray:
    """class_count x class_count counts over valid pixels; rows GT, cols pred."""
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.max() >= class_count or g.max() >= class_count):
        raise DataError(f"class index out of range for class_count={class_count}")
    if p.size and (p.min() < 0 or g.min() < 0):
        raise DataError("negative class index")
    counts = np.bincount(g * class_count + p, minlength=class_count * class_count)
    return counts.reshape(class_count, class_count)


def miou_from_confusion(confusion: np.ndarray) -> SegmentationEvalResult:
    """Per-class IoU from a confusion matrix; classes absent from both pred
    and GT are excluded from the mean."""
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    iou = {}
    for c in range(confusion.shape[0]):
        if union[c] > 0:
            iou[c] = float(tp[c] / union[c])
    mean_iou = float(np.mean(list(iou.values()))) if iou else 0.0
    return SegmentationEvalResult(
        iou=iou,
        mean_iou=mean_iou,
        valid_pixels=int(confusion.sum()),
        confusion=confusion,
    )


def compute_miou(
    pred: LabelMap,
    gt: LabelMap,
    valid: np.ndarray | None = None,
    class_count: int | None = None,
) -> SegmentationEvalResult:
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    class_count = class_count or gt.class_count
    if valid is None:
        valid = ~gt.ignore
    else:
        valid = np.asarray(valid, dtype=bool) & ~gt.ignore
    return miou_from_confusion(confusion_matrix(pred.classes, gt.classes, valid, class_count))
