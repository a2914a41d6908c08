"""Forward-pass output containers."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class PyramidFeatures:
    """Multi-scale feature maps; level i has shape (B, C, ceil(H/s_i), ceil(W/s_i))."""

    levels: list[torch.Tensor]
    strides: tuple[int, ...]

    def __post_init__(self) -> None:
        assert len(self.levels) == len(self.strides)

    def __len__(self) -> int:
        return len(self.levels)

    def detach(self) -> "PyramidFeatures":
        return PyramidFeatures([t.detach() for t in self.levels], self.strides)


@dataclass
class DetectionOutput:
    """Per-level class logits and box deltas, flattened location-major.

    class_logits[i]: (B, H_i * W_i * A, K); box_deltas[i]: (B, H_i * W_i * A, 4).
    anchors[i]: (H_i * W_i * A, 4) in input-pixel xyxy coordinates, same order.
    """

    class_logits: list[torch.Tensor]
    box_deltas: list[torch.Tensor]
    anchors: list[torch.Tensor]
    strides: tuple[int, ...]
    image_size: tuple[int, int]

    def cat_logits(self) -> torch.Tensor:
        return torch.cat(self.class_logits, dim=1)

    def cat_deltas(self) -> torch.Tensor:
        return torch.cat(self.box_deltas, dim=1)

    def cat_anchors(self) -> torch.Tensor:
        return torch.cat(self.anchors, dim=0)

    def same_geometry(self, other: "DetectionOutput") -> bool:
        if self.strides != other.strides or len(self.anchors) != len(other.anchors):
            return False
        return all(a.shape == b.shape for a, b in zip(self.anchors, other.anchors))


@dataclass
class SegmentationOutput:
    """Class logits at full input resolution: (B, seg_classes, H, W)."""

    logits: torch.Tensor
