"""Synthetic shape dataset: a desk-scale stand-in for aerial chip datasets.

Each chip is a textured background with randomly placed rectangles, discs and
L-shapes mapped to the building / tree / car classes, plus amorphous low
vegetation patches. Shapes are kept fully inside the chip and pairwise
separated by at least 2 pixels, so the analytic box record written next to
each mask coincides exactly with the connected-component derivation.

Both annotation kinds (pixel masks and boxes) are written for every chip, so
the same directory can back either task; the manifest's task tag decides which
annotation the loader reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from mtdistill.data.codec import (
    ISPRS_DETECTION_CLASSES,
    ClassTable,
    encode_label_image,
)
from mtdistill.data.types import Box, BoxSet, DatasetManifest, LabelMap, ManifestEntry, TASKS
from mtdistill.errors import ConfigError

# image colors per class: impervious, building, low veg, tree, car, clutter
_CLASS_SHADES = np.array(
    [
        [128, 126, 124],
        [196, 96, 64],
        [150, 200, 120],
        [30, 110, 40],
        [40, 70, 200],
        [180, 40, 40],
    ],
    dtype=np.float64,
)

_BUILDING, _LOW_VEG, _TREE, _CAR = 1, 2, 3, 4


@dataclass
class SyntheticConfig:
    chip_size: int = 128
    task: str = "segmentation"
    min_shapes: int = 2
    max_shapes: int = 5
    max_patches: int = 2
    noise_std: float = 9.0
    min_area: int = 12

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.chip_size < 32:
            raise ConfigError("chip_size must be at least 32")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ConfigError("need 1 <= min_shapes <= max_shapes")


@dataclass
class _Shape:
    class_id: int
    box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (exclusive max)
    kind: str
    extra: tuple = field(default_factory=tuple)


def _separated(box: tuple[int, int, int, int], placed: list[_Shape], gap: int = 2) -> bool:
    x0, y0, x1, y1 = box
    for s in placed:
        px0, py0, px1, py1 = s.box
        if x0 - gap < px1 and px0 - gap < x1 and y0 - gap < py1 and py0 - gap < y1:
            return False
    return True


def _sample_shape(rng: np.random.Generator, size: int, placed: list[_Shape]) -> _Shape | None:
    kind = rng.choice(["rect", "lshape", "disc", "car"])
    for _ in range(40):
        if kind == "rect":
            w = int(rng.integers(size // 6, size // 3))
            h = int(rng.integers(size // 6, size // 3))
            class_id = _BUILDING
        elif kind == "lshape":
            w = int(rng.integers(size // 5, size // 3))
            h = int(rng.integers(size // 5, size // 3))
            class_id = _BUILDING
        elif kind == "disc":
            r = int(rng.integers(max(4, size // 16), size // 8))
            w = h = 2 * r + 1
            class_id = _TREE
        else:
            low = max(6, size // 14)
            high = max(low + 2, size // 9)
            w = int(rng.integers(low, high))
            h = int(rng.integers(low, high))
            class_id = _CAR
        x0 = int(rng.integers(2, size - w - 2))
        y0 = int(rng.integers(2, size - h - 2))
        box = (x0, y0, x0 + w, y0 + h)
        if not _separated(box, placed):
            continue
        if kind == "disc":
            return _Shape(class_id, box, kind, extra=(x0 + w // 2, y0 + h // 2, w // 2))
        if kind == "lshape":
            # notch removed from one corner, at most half of each extent
            nw = int(rng.integers(w // 4, w // 2 + 1))
            nh = int(rng.integers(h // 4, h // 2 + 1))
            corner = int(rng.integers(0, 4))
            return _Shape(class_id, box, kind, extra=(nw, nh, corner))
        return _Shape(class_id, box, kind)
    return None


def _rasterize(shape: _Shape, classes: np.ndarray) -> None:
    x0, y0, x1, y1 = shape.box
    if shape.kind == "disc":
        # odd extent with the center pixel on both axes keeps the hull tight
        cx, cy, r = shape.extra
        yy, xx = np.ogrid[y0:y1, x0:x1]
        classes[y0:y1, x0:x1][(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = shape.class_id
    elif shape.kind == "lshape":
        nw, nh, corner = shape.extra
        classes[y0:y1, x0:x1] = shape.class_id
        if corner == 0:
            classes[y0 : y0 + nh, x0 : x0 + nw] = 0
        elif corner == 1:
            classes[y0 : y0 + nh, x1 - nw : x1] = 0
        elif corner == 2:
            classes[y1 - nh : y1, x0 : x0 + nw] = 0
        else:
            classes[y1 - nh : y1, x1 - nw : x1] = 0
    else:
        classes[y0:y1, x0:x1] = shape.class_id


def _add_patches(rng: np.random.Generator, classes: np.ndarray, max_patches: int) -> None:
    size = classes.shape[0]
    for _ in range(int(rng.integers(0, max_patches + 1))):
        cx, cy = rng.integers(0, size, size=2)
        ax = int(rng.integers(size // 8, size // 3))
        ay = int(rng.integers(size // 8, size // 3))
        yy, xx = np.ogrid[:size, :size]
        blob = ((xx - cx) / max(ax, 1)) ** 2 + ((yy - cy) / max(ay, 1)) ** 2 <= 1.0
        classes[blob] = _LOW_VEG


def generate_chip(
    rng: np.random.Generator, cfg: SyntheticConfig
) -> tuple[np.ndarray, LabelMap, BoxSet]:
    """One synthetic chip: uint8 image, label map, analytic box record."""
    size = cfg.chip_size
    classes = np.zeros((size, size), dtype=np.int64)
    _add_patches(rng, classes, cfg.max_patches)

    placed: list[_Shape] = []
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    for _ in range(n_shapes):
        shape = _sample_shape(rng, size, placed)
        if shape is None:
            continue
        placed.append(shape)
    for shape in placed:
        _rasterize(shape, classes)

    image = _CLASS_SHADES[classes]
    image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0, 255).astype(np.uint8)

    labels = LabelMap(classes=classes, ignore=np.zeros_like(classes, dtype=bool), class_count=6)
    records = sorted(
        ((s.class_id, s.box) for s in placed), key=lambda r: (r[0], r[1][1], r[1][0])
    )
    boxes = BoxSet(
        [
            Box(class_id=c, x_min=b[0], y_min=b[1], x_max=b[2], y_max=b[3])
            for c, b in records
        ]
    )
    return image, labels, boxes


def _write_split(
    out_dir: Path,
    split: str,
    count: int,
    seed: int,
    cfg: SyntheticConfig,
    table: ClassTable,
) -> tuple[DatasetManifest, np.ndarray, np.ndarray]:
    img_dir = out_dir / split / "images"
    lbl_dir = out_dir / split / "labels"
    box_dir = out_dir / split / "boxes"
    for d in (img_dir, lbl_dir, box_dir):
        d.mkdir(parents=True, exist_ok=True)

    entries = []
    mean_acc = np.zeros(3, dtype=np.float64)
    sq_acc = np.zeros(3, dtype=np.float64)
    split_tag = 0 if split == "train" else 1
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, split_tag, idx]))
        image, labels, boxes = generate_chip(rng, cfg)

        name = f"chip_{idx:05d}"
        Image.fromarray(image).save(img_dir / f"{name}.png")
        (lbl_dir / f"{name}.png").write_bytes(encode_label_image(labels, table))
        with open(box_dir / f"{name}.json", "w") as fh:
            json.dump(boxes.to_jsonable(), fh)

        annot = (
            f"{split}/boxes/{name}.json"
            if cfg.task == "detection"
            else f"{split}/labels/{name}.png"
        )
        entries.append(ManifestEntry(image=f"{split}/images/{name}.png", annotation=annot, task=cfg.task))
        scaled = image.reshape(-1, 3).astype(np.float64) / 255.0
        mean_acc += scaled.mean(axis=0)
        sq_acc += (scaled**2).mean(axis=0)

    manifest = DatasetManifest(
        split=split, task=cfg.task, entries=entries, class_names=list(table.names), root=out_dir
    )
    manifest.write(out_dir / f"manifest.{split}.jsonl")
    return manifest, mean_acc / count, sq_acc / count


def make_synthetic_dataset(
    seed: int,
    n_train: int,
    n_val: int,
    out_dir: Path,
    cfg: SyntheticConfig | None = None,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Generate a synthetic dataset under out_dir; deterministic in seed.

    Train and val chips come from disjoint random streams, so the two image
    sets are disjoint. Channel statistics of the train split are stored in the
    dataset config for normalization at load time.
    """
    if n_train <= 0 or n_val <= 0:
        raise ConfigError("n_train and n_val must be positive")
    cfg = cfg or SyntheticConfig()
    out_dir = Path(out_dir)
    table = ClassTable()

    train, mean, sq = _write_split(out_dir, "train", n_train, seed, cfg, table)
    val, _, _ = _write_split(out_dir, "val", n_val, seed, cfg, table)

    std = np.sqrt(np.maximum(sq - mean**2, 1e-8))
    dataset_cfg = {
        "task": cfg.task,
        "chip_size": cfg.chip_size,
        "class_table": table.to_jsonable(),
        "detection_classes": list(ISPRS_DETECTION_CLASSES),
        "min_area": cfg.min_area,
        "channel_mean": [round(float(v), 6) for v in mean],
        "channel_std": [round(float(v), 6) for v in std],
        "seed": seed,
    }
    tmp = out_dir / "dataset.yaml.tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(dataset_cfg, fh, sort_keys=True)
    tmp.replace(out_dir / "dataset.yaml")
    return train, val
