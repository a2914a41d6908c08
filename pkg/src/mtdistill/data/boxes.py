"""Deriving detection targets from segmentation masks.

Each blob of connected pixels of one class becomes one instance; its tight
axis-aligned hull becomes the box. Connectivity is 8-way, so diagonally
touching pixels merge into one blob.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from mtdistill.data.types import Box, BoxSet, LabelMap
from mtdistill.errors import DataError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

DEFAULT_MIN_AREA = 12


def mask_to_boxes(
    labels: LabelMap,
    selected_classes: list[int],
    min_area: int = DEFAULT_MIN_AREA,
) -> BoxSet:
    """One box per connected component of each selected class.

    Components smaller than `min_area` pixels are dropped (annotation noise).
    Ignored pixels belong to no class. Boxes carry no score.
    """
    for c in selected_classes:
        if not (0 <= c < labels.class_count):
            raise DataError(f"selected class {c} outside [0, {labels.class_count})")
    boxes: list[Box] = []
    for class_id in selected_classes:
        mask = (labels.classes == class_id) & ~labels.ignore
        if not mask.any():
            continue
        components, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        if n == 0:
            continue
        areas = ndimage.sum_labels(mask, components, index=np.arange(1, n + 1))
        slices = ndimage.find_objects(components)
        for comp_idx, sl in enumerate(slices):
            if sl is None or areas[comp_idx] < min_area:
                continue
            rows, cols = sl
            boxes.append(
                Box(
                    class_id=class_id,
                    x_min=float(cols.start),
                    y_min=float(rows.start),
                    x_max=float(cols.stop),
                    y_max=float(rows.stop),
                )
            )
    return BoxSet(boxes)
