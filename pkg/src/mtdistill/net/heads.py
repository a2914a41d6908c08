"""Task heads: single-stage anchor classification/regression and a
progressive-upsampling segmentation decoder."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from mtdistill.net.backbones import conv_gn_relu


class DetectionHead(nn.Module):
    """Shared conv towers over all pyramid levels, sigmoid classification.

    Emits per level (B, H*W*A, K) logits and (B, H*W*A, 4) deltas, locations
    row-major then anchor index, matching the generated anchor order.
    """

    def __init__(self, channels: int, num_anchors: int, num_classes: int, tower_depth: int = 4):
        super().__init__()
        self.num_anchors = num_anchors
        self.num_classes = num_classes
        self.cls_tower = nn.Sequential(
            *[conv_gn_relu(channels, channels) for _ in range(tower_depth)]
        )
        self.box_tower = nn.Sequential(
            *[conv_gn_relu(channels, channels) for _ in range(tower_depth)]
        )
        self.cls_pred = nn.Conv2d(channels, num_anchors * num_classes, 3, padding=1)
        self.box_pred = nn.Conv2d(channels, num_anchors * 4, 3, padding=1)

    def _flatten(self, x: torch.Tensor, per_anchor: int) -> torch.Tensor:
        b, _, h, w = x.shape
        x = x.view(b, self.num_anchors, per_anchor, h, w)
        x = x.permute(0, 3, 4, 1, 2)
        return x.reshape(b, h * w * self.num_anchors, per_anchor)

    def forward(self, levels: list[torch.Tensor]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        logits, deltas = [], []
        for feat in levels:
            logits.append(self._flatten(self.cls_pred(self.cls_tower(feat)), self.num_classes))
            deltas.append(self._flatten(self.box_pred(self.box_tower(feat)), 4))
        return logits, deltas


class SegmentationHead(nn.Module):
    """Decodes the stride-8 pyramid level back to full resolution.

    Two conv blocks with x2 upsampling between them, then a classifier and a
    final interpolation to the exact input size.
    """

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        mid = max(num_classes, channels // 2)
        self.block1 = conv_gn_relu(channels, channels)
        self.block2 = conv_gn_relu(channels, mid)
        self.classifier = nn.Conv2d(mid, num_classes, 1)

    def forward(self, p3: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        x = self.block1(p3)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.block2(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.classifier(x)
        return F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
