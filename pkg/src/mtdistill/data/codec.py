"""Color-image codec for label rasters.

Label masks are stored as RGB PNGs with one color per class. The default
table follows the common aerial land-cover convention (impervious white,
building blue, low vegetation cyan, tree green, car yellow, clutter red) and
can be overridden through the dataset config. An optional extra color marks
ignored pixels; the class value under an ignored pixel is normalized to 0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from mtdistill.data.types import LabelMap
from mtdistill.errors import DataError

ISPRS_CLASS_NAMES = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"]
ISPRS_CLASS_COLORS = [
    (255, 255, 255),
    (0, 0, 255),
    (0, 255, 255),
    (0, 255, 0),
    (255, 255, 0),
    (255, 0, 0),
]
# building, tree, car: the urban object classes boxes are derived for
ISPRS_DETECTION_CLASSES = [1, 3, 4]

DEFAULT_IGNORE_COLOR = (0, 0, 0)


@dataclass
class ClassTable:
    """Ordered class names with their mask colors."""

    names: list[str] = field(default_factory=lambda: list(ISPRS_CLASS_NAMES))
    colors: list[tuple[int, int, int]] = field(default_factory=lambda: list(ISPRS_CLASS_COLORS))
    ignore_color: Optional[tuple[int, int, int]] = DEFAULT_IGNORE_COLOR

    def __post_init__(self) -> None:
        self.colors = [tuple(c) for c in self.colors]  # type: ignore[misc]
        if self.ignore_color is not None:
            self.ignore_color = tuple(self.ignore_color)  # type: ignore[assignment]
        if len(self.names) != len(self.colors):
            raise DataError(
                f"class table has {len(self.names)} names but {len(self.colors)} colors"
            )
        if len(set(self.colors)) != len(self.colors):
            raise DataError("class colors must be distinct")
        if self.ignore_color is not None and self.ignore_color in self.colors:
            raise DataError("ignore color collides with a class color")

    def __len__(self) -> int:
        return len(self.names)

    def to_jsonable(self) -> dict:
        return {
            "names": list(self.names),
            "colors": [list(c) for c in self.colors],
            "ignore_color": list(self.ignore_color) if self.ignore_color else None,
        }

    @classmethod
    def from_jsonable(cls, rec: dict) -> "ClassTable":
        return cls(
            names=list(rec["names"]),
            colors=[tuple(c) for c in rec["colors"]],
            ignore_color=tuple(rec["ignore_color"]) if rec.get("ignore_color") else None,
        )


def _color_keys(colors: Sequence[tuple[int, int, int]]) -> np.ndarray:
    arr = np.asarray(colors, dtype=np.int64)
    return arr[:, 0] * 65536 + arr[:, 1] * 256 + arr[:, 2]


def decode_label_image(data: bytes, table: Optional[ClassTable] = None) -> LabelMap:
    """Decode an RGB mask image into a LabelMap.

    Any pixel whose color is not in the table (and not the ignore color) is an
    error; the message names the offending color and how many pixels carry it.
    """
    table = table or ClassTable()
    img = Image.open(io.BytesIO(data)).convert("RGB")
    rgb = np.asarray(img, dtype=np.int64)
    keys = rgb[:, :, 0] * 65536 + rgb[:, :, 1] * 256 + rgb[:, :, 2]

    classes = np.zeros(keys.shape, dtype=np.int64)
    matched = np.zeros(keys.shape, dtype=bool)
    for idx, key in enumerate(_color_keys(table.colors)):
        hit = keys == key
        classes[hit] = idx
        matched |= hit
    ignore = np.zeros(keys.shape, dtype=bool)
    if table.ignore_color is not None:
        ignore = keys == _color_keys([table.ignore_color])[0]
        matched |= ignore

    if not matched.all():
        bad = keys[~matched]
        key0 = int(bad[0])
        color = (key0 >> 16, (key0 >> 8) & 255, key0 & 255)
        count = int((bad == key0).sum())
        raise DataError(
            f"label image contains {count} pixel(s) of unknown color {color}"
        )
    classes[ignore] = 0
    return LabelMap(classes=classes, ignore=ignore, class_count=len(table))


def encode_label_image(labels: LabelMap, table: Optional[ClassTable] = None) -> bytes:
    """Encode a LabelMap as PNG bytes. Inverse of decode_label_image."""
    table = table or ClassTable()
    if labels.class_count > len(table):
        raise DataError(
            f"label map has {labels.class_count} classes but the table only {len(table)}"
        )
    if labels.ignore.any() and table.ignore_color is None:
        raise DataError("label map has ignored pixels but the table has no ignore color")
    palette = np.asarray(table.colors, dtype=np.uint8)
    rgb = palette[labels.classes]
    if table.ignore_color is not None:
        rgb[labels.ignore] = np.asarray(table.ignore_color, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
