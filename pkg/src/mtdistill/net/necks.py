"""Feature-pyramid necks: top-down (FPN) and top-down + bottom-up (PAFPN).

Both emit one feature map per configured pyramid stride, all with the same
channel count. Levels beyond stride 32 come from stride-2 convolutions on the
previous pyramid output.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from mtdistill.errors import ConfigError


class FPN(nn.Module):
    def __init__(self, in_channels: tuple[int, int, int], out_channels: int, n_levels: int):
        super().__init__()
        if not (1 <= n_levels <= 5):
            raise ConfigError(f"FPN supports 1..5 levels, got {n_levels}")
        self.n_levels = n_levels
        self.n_backbone = min(n_levels, 3)
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1) for c in in_channels[: self.n_backbone]
        )
        self.outputs = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(self.n_backbone)
        )
        self.extras = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
            for _ in range(n_levels - self.n_backbone)
        )

    def _topdown(self, features: tuple[torch.Tensor, ...]) -> list[torch.Tensor]:
        laterals = [lat(f) for lat, f in zip(self.laterals, features[: self.n_backbone])]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest"
            )
        return [conv(lat) for conv, lat in zip(self.outputs, laterals)]

    def _extend(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        for i, conv in enumerate(self.extras):
            prev = levels[-1] if i == 0 else F.relu(levels[-1])
            levels.append(conv(prev))
        return levels

    def forward(self, features: tuple[torch.Tensor, ...]) -> list[torch.Tensor]:
        return self._extend(self._topdown(features))


class PAFPN(FPN):
    """FPN plus a bottom-up aggregation pass over the backbone levels."""

    def __init__(self, in_channels: tuple[int, int, int], out_channels: int, n_levels: int):
        super().__init__(in_channels, out_channels, n_levels)
        self.downsamples = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
            for _ in range(self.n_backbone - 1)
        )
        self.bottomup_outputs = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1)
            for _ in range(self.n_backbone - 1)
        )

    def forward(self, features: tuple[torch.Tensor, ...]) -> list[torch.Tensor]:
        levels = self._topdown(features)
        for i in range(1, len(levels)):
            down = self.downsamples[i - 1](levels[i - 1])
            if down.shape[-2:] != levels[i].shape[-2:]:
                down = F.interpolate(down, size=levels[i].shape[-2:], mode="nearest")
            levels[i] = self.bottomup_outputs[i - 1](down + levels[i])
        return self._extend(levels)


def build_neck(name: str, in_channels: tuple[int, int, int], out_channels: int, n_levels: int) -> FPN:
    if name == "fpn":
        return FPN(in_channels, out_channels, n_levels)
    if name == "pafpn":
        return PAFPN(in_channels, out_channels, n_levels)
    raise ConfigError(f"unknown neck {name!r}")
