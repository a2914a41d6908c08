"""Assembling specs into runnable networks, plus the student-to-teacher
adapter convolutions used by feature distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from mtdistill.errors import ConfigError
from mtdistill.net.anchors import generate_anchors
from mtdistill.net.backbones import build_backbone
from mtdistill.net.heads import DetectionHead, SegmentationHead
from mtdistill.net.necks import build_neck
from mtdistill.net.outputs import DetectionOutput, PyramidFeatures, SegmentationOutput
from mtdistill.net.spec import NetworkSpec

# sigmoid classification starts near this foreground probability
_CLS_PRIOR = 0.01


@dataclass
class NetworkOutput:
    pyramid: PyramidFeatures
    detection: Optional[DetectionOutput] = None
    segmentation: Optional[SegmentationOutput] = None


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.backbone = build_backbone(spec.backbone)
        self.neck = build_neck(
            spec.neck, self.backbone.out_channels, spec.neck_channels, len(spec.pyramid_strides)
        )
        self.det_head = (
            DetectionHead(
                spec.neck_channels,
                spec.anchors_per_location,
                spec.det_classes,
                spec.head_tower_depth,
            )
            if "detection" in spec.heads
            else None
        )
        self.seg_head = (
            SegmentationHead(spec.neck_channels, spec.seg_classes)
            if "segmentation" in spec.heads
            else None
        )
        _init_parameters(self, seed)
        if self.det_head is not None:
            # rare-foreground prior keeps the focal loss stable early on
            with torch.no_grad():
                self.det_head.cls_pred.bias.fill_(-math.log((1 - _CLS_PRIOR) / _CLS_PRIOR))
        self._anchor_cache: dict[tuple, list[torch.Tensor]] = {}

    def anchors_for(self, level_shapes: Sequence[tuple[int, int]]) -> list[torch.Tensor]:
        key = tuple(level_shapes)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                level_shapes,
                self.spec.pyramid_strides,
                self.spec.anchor_scales,
                self.spec.anchor_ratios,
                self.spec.anchor_base_factor,
            )
        return self._anchor_cache[key]

    def forward(
        self, images: torch.Tensor, heads: Optional[Sequence[str]] = None
    ) -> NetworkOutput:
        """Run the encoder and the requested heads (default: all present)."""
        heads = tuple(heads) if heads is not None else self.spec.heads
        for h in heads:
            if (h == "detection" and self.det_head is None) or (
                h == "segmentation" and self.seg_head is None
            ):
                raise ConfigError(f"network has no {h} head")
        levels = self.neck(self.backbone(images))
        pyramid = PyramidFeatures(levels, self.spec.pyramid_strides)
        out = NetworkOutput(pyramid=pyramid)
        image_size = (int(images.shape[-2]), int(images.shape[-1]))
        if "detection" in heads:
            logits, deltas = self.det_head(levels)
            anchors = self.anchors_for([tuple(l.shape[-2:]) for l in levels])
            out.detection = DetectionOutput(
                class_logits=logits,
                box_deltas=deltas,
                anchors=[a.to(images.device) for a in anchors],
                strides=self.spec.pyramid_strides,
                image_size=image_size,
            )
        if "segmentation" in heads:
            out.segmentation = SegmentationOutput(self.seg_head(levels[0], image_size))
        return out


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every parameter from one generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, m in module.named_modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze_network(net: Network) -> Network:
    """Teacher mode: no gradients, eval behavior, parameters stay untouched."""
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


class AdapterSet(nn.Module):
    """One 3x3 convolution per pyramid level mapping student channels onto
    teacher channels; trained together with the student."""

    def __init__(self, student_channels: int, teacher_channels: int, n_levels: int, seed: int = 0):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(student_channels, teacher_channels, 3, padding=1) for _ in range(n_levels)
        )
        _init_parameters(self, seed)

    def forward(self, features: PyramidFeatures) -> list[torch.Tensor]:
        assert len(features.levels) == len(self.convs)
        return [conv(level) for conv, level in zip(self.convs, features.levels)]


def build_adapters(
    student_spec: NetworkSpec, teacher_spec: NetworkSpec, seed: int = 0
) -> AdapterSet:
    if len(student_spec.pyramid_strides) != len(teacher_spec.pyramid_strides):
        raise ConfigError(
            f"student has {len(student_spec.pyramid_strides)} pyramid levels but the "
            f"teacher has {len(teacher_spec.pyramid_strides)}"
        )
    return AdapterSet(
        student_spec.neck_channels,
        teacher_spec.neck_channels,
        len(student_spec.pyramid_strides),
        seed=seed,
    )
