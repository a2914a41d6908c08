"""Declarative network description, serializable into experiment configs."""

from __future__ import annotations

from dataclasses import dataclass

from mtdistill.errors import ConfigError

BACKBONES = ("resnet18", "resnet50", "tiny")
NECKS = ("fpn", "pafpn")
HEADS = ("detection", "segmentation")

DEFAULT_STRIDES = (8, 16, 32, 64, 128)


@dataclass
class NetworkSpec:
    """Everything needed to build a student or teacher network.

    Anchor geometry lives here so that a student and its detection teacher,
    built from specs sharing these fields, produce location-aligned outputs.
    """

    backbone: str = "resnet18"
    neck: str = "fpn"
    pyramid_strides: tuple[int, ...] = DEFAULT_STRIDES
    neck_channels: int = 256
    det_classes: int = 3
    seg_classes: int = 6
    heads: tuple[str, ...] = ("detection", "segmentation")
    anchor_scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_base_factor: float = 4.0
    head_tower_depth: int = 4

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.neck not in NECKS:
            raise ConfigError(f"unknown neck {self.neck!r}, expected one of {NECKS}")
        self.heads = tuple(self.heads)
        if not self.heads:
            raise ConfigError("at least one head is required")
        for h in self.heads:
            if h not in HEADS:
                raise ConfigError(f"unknown head {h!r}, expected subset of {HEADS}")
        self.pyramid_strides = tuple(int(s) for s in self.pyramid_strides)
        strides = self.pyramid_strides
        if not strides or strides[0] != 8:
            raise ConfigError("pyramid strides must start at 8")
        for a, b in zip(strides, strides[1:]):
            if b != 2 * a:
                raise ConfigError(f"pyramid strides must double at each level, got {strides}")
        if len(strides) > 5:
            raise ConfigError("at most 5 pyramid levels are supported")
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError("anchor scales and ratios must be non-empty")

    @property
    def anchors_per_location(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "neck": self.neck,
            "pyramid_strides": list(self.pyramid_strides),
            "neck_channels": self.neck_channels,
            "det_classes": self.det_classes,
            "seg_classes": self.seg_classes,
            "heads": list(self.heads),
            "anchor_scales": list(self.anchor_scales),
            "anchor_ratios": list(self.anchor_ratios),
            "anchor_base_factor": self.anchor_base_factor,
            "head_tower_depth": self.head_tower_depth,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "NetworkSpec":
        known = {f for f in cls.__dataclass_fields__}  # noqa: C416
        unknown = set(rec) - known
        if unknown:
            raise ConfigError(f"unknown network spec keys: {sorted(unknown)}")
        kwargs = dict(rec)
        for key in ("pyramid_strides", "heads", "anchor_scales", "anchor_ratios"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def shares_anchor_geometry(self, other: "NetworkSpec") -> bool:
        return (
            self.pyramid_strides == other.pyramid_strides
            and self.anchor_scales == other.anchor_scales
            and self.anchor_ratios == other.anchor_ratios
            and self.anchor_base_factor == other.anchor_base_factor
        )
