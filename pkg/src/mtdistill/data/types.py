"""Core data containers: per-pixel label rasters, boxes, image chips, manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from mtdistill.errors import DataError

TASK_DETECTION = "detection"
TASK_SEGMENTATION = "segmentation"
TASKS = (TASK_DETECTION, TASK_SEGMENTATION)


@dataclass
class LabelMap:
    """Per-pixel class indices for one chip plus a boolean ignore raster.

    Every non-ignored pixel holds a class index in [0, class_count). The value
    under an ignored pixel is meaningless and normalized to 0 by the codec.
    """

    classes: np.ndarray
    ignore: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        self.classes = np.asarray(self.classes)
        self.ignore = np.asarray(self.ignore, dtype=bool)
        if self.classes.ndim != 2:
            raise DataError(f"label raster must be 2-D, got shape {self.classes.shape}")
        if self.classes.shape != self.ignore.shape:
            raise DataError(
                f"classes {self.classes.shape} and ignore {self.ignore.shape} differ in shape"
            )
        if self.class_count <= 0:
            raise DataError("class_count must be positive")
        valid = self.classes[~self.ignore]
        if valid.size and (valid.min() < 0 or valid.max() >= self.class_count):
            raise DataError(
                f"non-ignored label values must lie in [0, {self.class_count}), "
                f"found range [{valid.min()}, {valid.max()}]"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.ignore, other.ignore)
            and np.array_equal(self.classes[~self.ignore], other.classes[~other.ignore])
        )


@dataclass
class Box:
    """Axis-aligned box: min coords inclusive, max coords exclusive, in pixels."""

    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise DataError(f"box score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class BoxSet:
    """All boxes for one chip."""

    boxes: list[Box] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return iter(self.boxes)

    def __getitem__(self, idx: int) -> Box:
        return self.boxes[idx]

    def class_ids(self) -> np.ndarray:
        return np.array([b.class_id for b in self.boxes], dtype=np.int64)

    def coords(self) -> np.ndarray:
        """N x 4 float array of (x_min, y_min, x_max, y_max)."""
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)

    def scores(self) -> np.ndarray:
        return np.array(
            [b.score if b.score is not None else np.nan for b in self.boxes], dtype=np.float64
        )

    def to_jsonable(self) -> list[dict]:
        out = []
        for b in self.boxes:
            rec = {
                "class_id": int(b.class_id),
                "x_min": float(b.x_min),
                "y_min": float(b.y_min),
                "x_max": float(b.x_max),
                "y_max": float(b.y_max),
            }
            if b.score is not None:
                rec["score"] = float(b.score)
            out.append(rec)
        return out

    @classmethod
    def from_jsonable(cls, records: Sequence[dict]) -> "BoxSet":
        return cls(
            [
                Box(
                    class_id=int(r["class_id"]),
                    x_min=float(r["x_min"]),
                    y_min=float(r["y_min"]),
                    x_max=float(r["x_max"]),
                    y_max=float(r["y_max"]),
                    score=float(r["score"]) if "score" in r else None,
                )
                for r in records
            ]
        )


@dataclass
class Chip:
    """Normalized 3-channel image crop taken from a larger source tile."""

    image: np.ndarray
    source_tile: str
    offset: tuple[int, int]

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"chip image must be HxWx3, got shape {self.image.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]  # type: ignore[return-value]


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    task: str


@dataclass
class DatasetManifest:
    """One split of a dataset on disk: the entries plus shared metadata."""

    split: str
    task: str
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}, expected one of {TASKS}")
        for e in self.entries:
            if e.task != self.task:
                raise DataError(f"manifest entry task {e.task!r} differs from split task {self.task!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path: Path) -> None:
        """Write as json-lines, one entry per line, atomically."""
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps({"image": e.image, "annotation": e.annotation, "task": e.task})
                    + "\n"
                )
        tmp.replace(path)

    @classmethod
    def read(cls, path: Path, split: str, class_names: list[str]) -> "DatasetManifest":
        entries = []
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(
                        ManifestEntry(image=rec["image"], annotation=rec["annotation"], task=rec["task"])
                    )
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"{path}:{line_no}: bad manifest line ({exc})") from exc
        if not entries:
            raise DataError(f"{path}: empty manifest")
        return cls(
            split=split,
            task=entries[0].task,
            entries=entries,
            class_names=class_names,
            root=path.parent,
        )
