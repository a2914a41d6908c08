"""Batch assembly: infinite per-task sampling, flip augmentation, tensors.

Each task dataset gets its own infinite shuffled iterator, reshuffled every
epoch from (seed, epoch), so datasets of different sizes cycle independently.
Augmentation draws come from a per-sample stream keyed by (seed, task, epoch,
position): batch content is a pure function of the sampler state, which makes
runs resumable and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from mtdistill.data.loader import ChipDataset
from mtdistill.data.types import Box, BoxSet, LabelMap, TASK_DETECTION

_TASK_TAGS = {"detection": 0, "segmentation": 1}


@dataclass
class TaskBatch:
    """Images plus annotations for exactly one task."""

    task: str
    images: torch.Tensor  # (B, 3, H, W) float32, normalized
    boxes: Optional[list[BoxSet]] = None
    classes: Optional[torch.Tensor] = None  # (B, H, W) long
    ignore: Optional[torch.Tensor] = None  # (B, H, W) bool
    dataset_id: str = ""

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise ValueError("batch must be a non-empty (B, 3, H, W) tensor")
        if self.task == TASK_DETECTION:
            assert self.boxes is not None and len(self.boxes) == self.images.shape[0]
        else:
            assert self.classes is not None and self.ignore is not None

    def __len__(self) -> int:
        return int(self.images.shape[0])


class EpochSampler:
    """Infinite index stream: a fresh seeded permutation every epoch."""

    def __init__(self, n_items: int, seed: int, shuffle: bool = True):
        if n_items <= 0:
            raise ValueError("cannot sample from an empty dataset")
        self.n_items = n_items
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self.pos = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(self.n_items)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return rng.permutation(self.n_items)

    def state(self) -> tuple[int, int]:
        return (self.epoch, self.pos)

    def load_state(self, state: tuple[int, int]) -> None:
        self.epoch, self.pos = int(state[0]), int(state[1])
        self._perm = self._permutation(self.epoch)

    def next(self) -> tuple[int, int, int]:
        """(index, epoch, position) of the next sample; advances the stream."""
        if self.pos >= self.n_items:
            self.epoch += 1
            self.pos = 0
            self._perm = self._permutation(self.epoch)
        idx = int(self._perm[self.pos])
        out = (idx, self.epoch, self.pos)
        self.pos += 1
        return out


def _flip_image(image: np.ndarray, hflip: bool, vflip: bool) -> np.ndarray:
    if hflip:
        image = image[:, ::-1]
    if vflip:
        image = image[::-1]
    return image


def _flip_boxes(boxes: BoxSet, width: int, height: int, hflip: bool, vflip: bool) -> BoxSet:
    out = []
    for b in boxes:
        x_min, y_min, x_max, y_max = b.as_tuple()
        if hflip:
            x_min, x_max = width - x_max, width - x_min
        if vflip:
            y_min, y_max = height - y_max, height - y_min
        out.append(Box(b.class_id, x_min, y_min, x_max, y_max, b.score))
    return BoxSet(out)


class TaskLoader:
    """Draws augmented batches from one task's train split."""

    def __init__(
        self,
        dataset: ChipDataset,
        batch_size: int,
        seed: int,
        augment: bool = True,
        device: str = "cpu",
    ):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.device = device
        self.task = dataset.task
        self.sampler = EpochSampler(len(dataset), seed=seed ^ _TASK_TAGS[self.task])

    def state(self) -> tuple[int, int]:
        return self.sampler.state()

    def load_state(self, state: tuple[int, int]) -> None:
        self.sampler.load_state(state)

    def _sample_flips(self, epoch: int, pos: int) -> tuple[bool, bool]:
        if not self.augment:
            return False, False
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _TASK_TAGS[self.task], epoch, pos])
        )
        return bool(rng.random() < 0.5), bool(rng.random() < 0.5)

    def next_batch(self) -> TaskBatch:
        images = []
        boxes: list[BoxSet] = []
        class_maps = []
        ignore_maps = []
        for _ in range(self.batch_size):
            idx, epoch, pos = self.sampler.next()
            image, annotation = self.dataset[idx]
            hflip, vflip = self._sample_flips(epoch, pos)
            image = _flip_image(image, hflip, vflip)
            height, width = image.shape[:2]
            images.append(np.ascontiguousarray(image.transpose(2, 0, 1)))
            if self.task == TASK_DETECTION:
                boxes.append(_flip_boxes(annotation, width, height, hflip, vflip))
            else:
                lm: LabelMap = annotation
                class_maps.append(np.ascontiguousarray(_flip_image(lm.classes, hflip, vflip)))
                ignore_maps.append(np.ascontiguousarray(_flip_image(lm.ignore, hflip, vflip)))

        stack = torch.from_numpy(np.stack(images)).float().to(self.device)
        if self.task == TASK_DETECTION:
            return TaskBatch(
                task=self.task, images=stack, boxes=boxes, dataset_id=self.dataset.info.name
            )
        return TaskBatch(
            task=self.task,
            images=stack,
            classes=torch.from_numpy(np.stack(class_maps)).long().to(self.device),
            ignore=torch.from_numpy(np.stack(ignore_maps)).to(self.device),
            dataset_id=self.dataset.info.name,
        )
