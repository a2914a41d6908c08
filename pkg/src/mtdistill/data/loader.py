"""Reading datasets back from disk: config, manifests, chips, annotations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from mtdistill.data.codec import ClassTable, decode_label_image
from mtdistill.data.types import Box, BoxSet, DatasetManifest, LabelMap
from mtdistill.errors import DataError


@dataclass
class DatasetInfo:
    name: str
    task: str
    chip_size: int
    class_table: ClassTable
    detection_classes: list[int]
    min_area: int
    channel_mean: np.ndarray
    channel_std: np.ndarray


def read_dataset_info(root: Path) -> DatasetInfo:
    cfg_path = Path(root) / "dataset.yaml"
    if not cfg_path.exists():
        raise DataError(f"dataset config not found: {cfg_path}")
    with open(cfg_path) as fh:
        cfg = yaml.safe_load(fh)
    try:
        return DatasetInfo(
            name=Path(root).name,
            task=cfg["task"],
            chip_size=int(cfg["chip_size"]),
            class_table=ClassTable.from_jsonable(cfg["class_table"]),
            detection_classes=[int(c) for c in cfg["detection_classes"]],
            min_area=int(cfg["min_area"]),
            channel_mean=np.asarray(cfg["channel_mean"], dtype=np.float32),
            channel_std=np.asarray(cfg["channel_std"], dtype=np.float32),
        )
    except KeyError as exc:
        raise DataError(f"{cfg_path}: missing key {exc}") from exc


class ChipDataset:
    """One split of a dataset; decodes chips lazily with an in-memory cache.

    Images come back normalized: float32, (value/255 - mean) / std per channel.
    """

    def __init__(self, root: Path, split: str, cache: bool = True):
        self.root = Path(root)
        self.split = split
        self.info = read_dataset_info(self.root)
        manifest_path = self.root / f"manifest.{split}.jsonl"
        if not manifest_path.exists():
            raise DataError(f"manifest not found: {manifest_path}")
        self.manifest = DatasetManifest.read(
            manifest_path, split=split, class_names=list(self.info.class_table.names)
        )
        self._cache: Optional[dict[int, tuple]] = {} if cache else None
        missing = [
            rel
            for e in self.manifest.entries
            for rel in (e.image, e.annotation)
            if not (self.root / rel).exists()
        ]
        if missing:
            raise DataError(
                f"{manifest_path}: {len(missing)} referenced file(s) missing, "
                f"first: {self.root / missing[0]}"
            )

    @property
    def task(self) -> str:
        return self.manifest.task

    @property
    def class_count(self) -> int:
        return len(self.info.class_table)

    def __len__(self) -> int:
        return len(self.manifest)

    def load_image(self, idx: int) -> np.ndarray:
        entry = self.manifest.entries[idx]
        img = Image.open(self.root / entry.image).convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return (arr - self.info.channel_mean) / self.info.channel_std

    def remap_boxes(self, boxes: BoxSet) -> BoxSet:
        """Raw class ids (e.g. 1/3/4 in the 6-class table) to 0..K-1 head ids."""
        mapping = {raw: i for i, raw in enumerate(self.info.detection_classes)}
        out = []
        for b in boxes:
            if b.class_id not in mapping:
                raise DataError(
                    f"box class {b.class_id} not in detection classes "
                    f"{self.info.detection_classes}"
                )
            out.append(Box(mapping[b.class_id], b.x_min, b.y_min, b.x_max, b.y_max, b.score))
        return BoxSet(out)

    def load_annotation(self, idx: int, remap: bool = True):
        """BoxSet for detection manifests, LabelMap for segmentation ones.

        Detection class ids come back remapped to contiguous head indices
        unless remap=False asks for the raw table ids.
        """
        entry = self.manifest.entries[idx]
        path = self.root / entry.annotation
        if self.task == "detection":
            with open(path) as fh:
                boxes = BoxSet.from_jsonable(json.load(fh))
            return self.remap_boxes(boxes) if remap else boxes
        return decode_label_image(path.read_bytes(), self.info.class_table)

    def __getitem__(self, idx: int):
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        item = (self.load_image(idx), self.load_annotation(idx))
        if self._cache is not None:
            self._cache[idx] = item
        return item

    def load_labels(self, idx: int) -> LabelMap:
        """Segmentation mask for this chip regardless of the manifest task."""
        entry = self.manifest.entries[idx]
        if self.task == "segmentation":
            path = self.root / entry.annotation
        else:
            path = self.root / entry.annotation.replace("boxes/", "labels/").replace(
                ".json", ".png"
            )
        if not path.exists():
            raise DataError(f"no segmentation mask next to {entry.annotation}")
        return decode_label_image(path.read_bytes(), self.info.class_table)


def load_dataset(root: Path, split: str, cache: bool = True) -> ChipDataset:
    return ChipDataset(root, split, cache=cache)
