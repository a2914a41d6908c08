"""Ingesting real aerial tiles into the chip-dataset layout.

The split definition is a YAML file, not hard-coded: it lists each tile's
image, its label mask and the split it belongs to, plus cropping parameters.

Example split config::

    task: segmentation
    chip_size: 320
    stride: 320
    min_area: 12
    tiles:
      - {image: tiles/area1.tif, label: tiles/area1_label.png, split: train}
      - {image: tiles/area2.tif, label: tiles/area2_label.png, split: val}

Chips are written in the same layout the synthetic generator uses, so the
rest of the pipeline makes no distinction between real and synthetic data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from mtdistill.data.boxes import mask_to_boxes
from mtdistill.data.codec import ISPRS_DETECTION_CLASSES, ClassTable, decode_label_image, encode_label_image
from mtdistill.data.tiles import crop_tiles
from mtdistill.data.types import DatasetManifest, ManifestEntry, TASKS
from mtdistill.errors import DataError

Image.MAX_IMAGE_PIXELS = None  # aerial tiles are large


DEFAULT_CHIP_SIZE = 320


def _load_split_config(path: Path) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    for key in ("task", "tiles"):
        if key not in cfg:
            raise DataError(f"{path}: split config missing key {key!r}")
    if cfg["task"] not in TASKS:
        raise DataError(f"{path}: unknown task {cfg['task']!r}")
    cfg.setdefault("chip_size", DEFAULT_CHIP_SIZE)
    return cfg


def ingest_tiles(split_config: Path, source_root: Path, out_dir: Path) -> dict[str, DatasetManifest]:
    """Crop the configured tiles into chips and write a chip dataset.

    Returns the manifest per split. Chip counts per split depend entirely on
    the tile list and stride in the split config.
    """
    split_config = Path(split_config)
    source_root = Path(source_root)
    out_dir = Path(out_dir)
    cfg = _load_split_config(split_config)

    chip_size = int(cfg["chip_size"])
    stride = int(cfg.get("stride", chip_size))
    min_area = int(cfg.get("min_area", 12))
    task = cfg["task"]
    table = (
        ClassTable.from_jsonable(cfg["class_table"]) if "class_table" in cfg else ClassTable()
    )
    det_classes = [int(c) for c in cfg.get("detection_classes", ISPRS_DETECTION_CLASSES)]

    entries: dict[str, list[ManifestEntry]] = {}
    mean_acc = np.zeros(3, dtype=np.float64)
    sq_acc = np.zeros(3, dtype=np.float64)
    n_train_px = 0

    for tile_cfg in cfg["tiles"]:
        split = tile_cfg["split"]
        image_path = source_root / tile_cfg["image"]
        label_path = source_root / tile_cfg["label"]
        if not image_path.exists():
            raise DataError(f"tile image not found: {image_path}")
        if not label_path.exists():
            raise DataError(f"tile label not found: {label_path}")
        tile_image = np.asarray(Image.open(image_path).convert("RGB"))
        tile_labels = decode_label_image(label_path.read_bytes(), table)

        img_dir = out_dir / split / "images"
        lbl_dir = out_dir / split / "labels"
        box_dir = out_dir / split / "boxes"
        for d in (img_dir, lbl_dir, box_dir):
            d.mkdir(parents=True, exist_ok=True)

        tile_id = image_path.stem
        for chip, labels in crop_tiles(tile_image, tile_labels, chip_size, stride, tile_id):
            name = f"{tile_id}_r{chip.offset[0]:05d}_c{chip.offset[1]:05d}"
            Image.fromarray(chip.image.astype(np.uint8)).save(img_dir / f"{name}.png")
            (lbl_dir / f"{name}.png").write_bytes(encode_label_image(labels, table))
            boxes = mask_to_boxes(labels, det_classes, min_area)
            with open(box_dir / f"{name}.json", "w") as fh:
                json.dump(boxes.to_jsonable(), fh)
            annot = (
                f"{split}/boxes/{name}.json" if task == "detection" else f"{split}/labels/{name}.png"
            )
            entries.setdefault(split, []).append(
                ManifestEntry(image=f"{split}/images/{name}.png", annotation=annot, task=task)
            )
            if split == "train":
                scaled = chip.image.reshape(-1, 3).astype(np.float64) / 255.0
                mean_acc += scaled.mean(axis=0)
                sq_acc += (scaled**2).mean(axis=0)
                n_train_px += 1

    if not entries:
        raise DataError(f"{split_config}: no tiles listed")

    manifests = {}
    for split, split_entries in entries.items():
        manifest = DatasetManifest(
            split=split, task=task, entries=split_entries, class_names=list(table.names), root=out_dir
        )
        manifest.write(out_dir / f"manifest.{split}.jsonl")
        manifests[split] = manifest

    if n_train_px:
        mean = mean_acc / n_train_px
        std = np.sqrt(np.maximum(sq_acc / n_train_px - mean**2, 1e-8))
    else:
        mean, std = np.full(3, 0.5), np.full(3, 0.25)
    dataset_cfg = {
        "task": task,
        "chip_size": chip_size,
        "class_table": table.to_jsonable(),
        "detection_classes": det_classes,
        "min_area": min_area,
        "channel_mean": [round(float(v), 6) for v in mean],
        "channel_std": [round(float(v), 6) for v in std],
        "split_config": str(split_config),
    }
    tmp = out_dir / "dataset.yaml.tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(dataset_cfg, fh, sort_keys=True)
    tmp.replace(out_dir / "dataset.yaml")
    return manifests
