"""Cropping large source tiles into fixed-size chips on a regular grid."""

from __future__ import annotations

import math

import numpy as np

from mtdistill.data.types import Chip, LabelMap
from mtdistill.errors import DataError


def grid_starts(extent: int, chip_size: int, stride: int) -> list[int]:
    """Window start offsets along one axis.

    Regular stride steps; the final window is snapped inward so it ends exactly
    at the tile edge. Gives ceil((extent - chip_size) / stride) + 1 offsets.
    """
    if extent < chip_size:
        raise DataError(f"tile extent {extent} smaller than chip size {chip_size}")
    n = math.ceil((extent - chip_size) / stride) + 1
    return [min(i * stride, extent - chip_size) for i in range(n)]


def crop_tiles(
    tile_image: np.ndarray,
    tile_labels: LabelMap,
    chip_size: int,
    stride: int,
    source_tile: str = "",
) -> list[tuple[Chip, LabelMap]]:
    """Cut a tile and its label raster into aligned chip_size x chip_size chips.

    Windows step by `stride`; windows that would overrun the tile edge are
    snapped inward so every chip lies fully inside the tile. With
    stride == chip_size the grid is non-overlapping except for snapped edges.
    """
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    tile_image = np.asarray(tile_image)
    if tile_image.ndim != 3 or tile_image.shape[2] != 3:
        raise DataError(f"tile image must be HxWx3, got shape {tile_image.shape}")
    if tile_image.shape[:2] != tile_labels.shape:
        raise DataError(
            f"tile image {tile_image.shape[:2]} and labels {tile_labels.shape} differ in size"
        )
    height, width = tile_image.shape[:2]
    out: list[tuple[Chip, LabelMap]] = []
    for row in grid_starts(height, chip_size, stride):
        for col in grid_starts(width, chip_size, stride):
            window = (slice(row, row + chip_size), slice(col, col + chip_size))
            chip = Chip(
                image=tile_image[window],
                source_tile=source_tile,
                offset=(row, col),
            )
            labels = LabelMap(
                classes=tile_labels.classes[window].copy(),
                ignore=tile_labels.ignore[window].copy(),
                class_count=tile_labels.class_count,
            )
            out.append((chip, labels))
    return out
