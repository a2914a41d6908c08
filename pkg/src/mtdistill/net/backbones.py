"""Backbone encoders exposing three stages at strides 8, 16 and 32.

GroupNorm is used everywhere instead of BatchNorm: outputs become a pure
function of parameters and input, independent of batch composition, which the
determinism and frozen-teacher contracts rely on.
"""

from __future__ import annotations

import torch
from torch import nn

from mtdistill.errors import ConfigError


def group_norm(channels: int) -> nn.GroupNorm:
    # >= 2 channels per group keeps 1x1 feature maps normalizable
    for groups in (32, 16, 8, 4, 2):
        if channels % groups == 0 and channels // groups >= 2:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def conv_gn_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        group_norm(out_ch),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, ch, 3, stride=stride, padding=1, bias=False)
        self.gn1 = group_norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.gn2 = group_norm(ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, ch, 1, stride=stride, bias=False), group_norm(ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.gn1(self.conv1(x)))
        out = self.gn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, ch: int, stride: int = 1):
        super().__init__()
        out_ch = ch * self.expansion
        self.conv1 = nn.Conv2d(in_ch, ch, 1, bias=False)
        self.gn1 = group_norm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, stride=stride, padding=1, bias=False)
        self.gn2 = group_norm(ch)
        self.conv3 = nn.Conv2d(ch, out_ch, 1, bias=False)
        self.gn3 = group_norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), group_norm(out_ch)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.gn1(self.conv1(x)))
        out = self.relu(self.gn2(self.conv2(out)))
        out = self.gn3(self.conv3(out))
        return self.relu(out + identity)


class ResNet(nn.Module):
    """Stages C2..C5; forward returns (C3, C4, C5) at strides (8, 16, 32)."""

    def __init__(self, block: type, layers: tuple[int, int, int, int]):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            group_norm(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.in_ch = 64
        self.layer1 = self._stage(block, 64, layers[0], stride=1)
        self.layer2 = self._stage(block, 128, layers[1], stride=2)
        self.layer3 = self._stage(block, 256, layers[2], stride=2)
        self.layer4 = self._stage(block, 512, layers[3], stride=2)
        self.out_channels = (
            128 * block.expansion,
            256 * block.expansion,
            512 * block.expansion,
        )

    def _stage(self, block: type, ch: int, depth: int, stride: int) -> nn.Sequential:
        blocks = [block(self.in_ch, ch, stride)]
        self.in_ch = ch * block.expansion
        blocks += [block(self.in_ch, ch) for _ in range(depth - 1)]
        return nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.stem(x)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c3, c4, c5


class TinyBackbone(nn.Module):
    """Four-stage convnet (~0.25M params) for desk-scale tests and CI."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(conv_gn_relu(3, 16, stride=2), conv_gn_relu(16, 24, stride=2))
        self.stage3 = nn.Sequential(conv_gn_relu(24, 48, stride=2), conv_gn_relu(48, 48))
        self.stage4 = nn.Sequential(conv_gn_relu(48, 64, stride=2), conv_gn_relu(64, 64))
        self.stage5 = nn.Sequential(conv_gn_relu(64, 96, stride=2), conv_gn_relu(96, 96))
        self.out_channels = (48, 64, 96)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.stem(x)
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


def build_backbone(name: str) -> nn.Module:
    if name == "resnet18":
        return ResNet(BasicBlock, (2, 2, 2, 2))
    if name == "resnet50":
        return ResNet(Bottleneck, (3, 4, 6, 3))
    if name == "tiny":
        return TinyBackbone()
    raise ConfigError(f"unknown backbone {name!r}")
