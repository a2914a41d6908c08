"""Running a network over a validation split and scoring it."""

from __future__ import annotations

import numpy as np
import torch

from mtdistill.config import EvalConfig
from mtdistill.data.loader import ChipDataset
from mtdistill.data.types import LabelMap
from mtdistill.errors import ConfigError
from mtdistill.evaluation import (
    DetectionEvalResult,
    SegmentationEvalResult,
    compute_map,
    confusion_matrix,
    erode_valid_mask,
    miou_from_confusion,
)
from mtdistill.net.network import Network
from mtdistill.net.postprocess import decode_and_nms


def _batches(dataset: ChipDataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        images = []
        annotations = []
        for i in idx:
            image, annotation = dataset[i]
            images.append(np.ascontiguousarray(image.transpose(2, 0, 1)))
            annotations.append(annotation)
        yield torch.from_numpy(np.stack(images)).float(), annotations


def evaluate_on_dataset(
    network: Network,
    dataset: ChipDataset,
    eval_cfg: EvalConfig | None = None,
    device: str = "cpu",
    batch_size: int = 8,
) -> DetectionEvalResult | SegmentationEvalResult:
    """Score the network on the dataset's own task over its whole split."""
    eval_cfg = eval_cfg or EvalConfig()
    task = dataset.task
    if (task == "detection" and network.det_head is None) or (
        task == "segmentation" and network.seg_head is None
    ):
        raise ConfigError(f"checkpoint has no {task} head")

    was_training = network.training
    network.eval()
    try:
        if task == "detection":
            predictions, ground_truths = [], []
            for images, annotations in _batches(dataset, batch_size):
                with torch.no_grad():
                    out = network(images.to(device), heads=["detection"])
                predictions.extend(
                    decode_and_nms(
                        out.detection,
                        score_thresh=eval_cfg.score_thresh,
                        nms_iou=eval_cfg.nms_iou,
                        max_dets=eval_cfg.max_dets,
                    )
                )
                ground_truths.extend(annotations)
            return compute_map(predictions, ground_truths)

        total = np.zeros((dataset.class_count, dataset.class_count), dtype=np.int64)
        for images, annotations in _batches(dataset, batch_size):
            with torch.no_grad():
                out = network(images.to(device), heads=["segmentation"])
            pred = out.segmentation.logits.argmax(dim=1).cpu().numpy()
            for i, gt in enumerate(annotations):
                gt_map: LabelMap = gt
                valid = erode_valid_mask(gt_map, eval_cfg.erode_radius)
                total += confusion_matrix(pred[i], gt_map.classes, valid, dataset.class_count)
        return miou_from_confusion(total)
    finally:
        if was_training:
            network.train()


def primary_metric(result: DetectionEvalResult | SegmentationEvalResult) -> float:
    if isinstance(result, DetectionEvalResult):
        return result.mean_ap
    return result.mean_iou
