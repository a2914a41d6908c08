from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mtdistill.data.synthetic import SyntheticConfig, make_synthetic_dataset
from mtdistill.net.spec import NetworkSpec

torch.set_num_threads(max(1, torch.get_num_threads()))


def tiny_spec(**kwargs) -> NetworkSpec:
    base = dict(
        backbone="tiny",
        neck="fpn",
        neck_channels=32,
        det_classes=3,
        seg_classes=6,
        head_tower_depth=1,
    )
    base.update(kwargs)
    return NetworkSpec(**base)


@pytest.fixture(scope="session")
def tiny_student_spec() -> NetworkSpec:
    return tiny_spec()


@pytest.fixture(scope="session")
def tiny_teacher_spec() -> NetworkSpec:
    return tiny_spec(neck="pafpn", neck_channels=48, head_tower_depth=2)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    """Two small synthetic datasets (one per task) shared across tests."""
    root = tmp_path_factory.mktemp("synth")
    make_synthetic_dataset(
        11, 12, 6, root / "det", SyntheticConfig(chip_size=64, task="detection")
    )
    make_synthetic_dataset(
        22, 12, 6, root / "seg", SyntheticConfig(chip_size=64, task="segmentation")
    )
    return root
