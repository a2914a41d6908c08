"""Checkpoint archive: spec + seed + parameter blobs + iteration counter.

Teachers are ordinary checkpoints loaded read-only; training checkpoints may
carry extra state (optimizer, sampler positions) that inference loads ignore.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import torch

from mtdistill.errors import ConfigError
from mtdistill.net.network import Network, build_network, freeze_network
from mtdistill.net.spec import NetworkSpec

_FORMAT = 1


@dataclass
class CheckpointMeta:
    spec: NetworkSpec
    seed: int
    iteration: int
    extra: dict[str, Any]


def save_checkpoint(
    path: Path,
    network: Network,
    iteration: int,
    extra: Optional[dict[str, Any]] = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": _FORMAT,
        "spec": network.spec.to_dict(),
        "seed": network.seed,
        "iteration": int(iteration),
        "params": network.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path, frozen: bool = False) -> tuple[Network, CheckpointMeta]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != _FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    spec = NetworkSpec.from_dict(payload["spec"])
    network = build_network(spec, seed=payload["seed"])
    network.load_state_dict(payload["params"])
    if frozen:
        freeze_network(network)
    meta = CheckpointMeta(
        spec=spec,
        seed=payload["seed"],
        iteration=payload["iteration"],
        extra=payload.get("extra", {}),
    )
    return network, meta
