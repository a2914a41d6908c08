from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtdistill.data.boxes import mask_to_boxes
from mtdistill.data.types import LabelMap
from mtdistill.errors import DataError
from oracles import floodfill_boxes


def _label_map(classes: np.ndarray, class_count: int = 6, ignore=None) -> LabelMap:
    if ignore is None:
        ignore = np.zeros(classes.shape, dtype=bool)
    return LabelMap(classes=classes, ignore=ignore, class_count=class_count)


def _as_set(boxes):
    return {(b.class_id, b.x_min, b.y_min, b.x_max, b.y_max) for b in boxes}


def test_empty_map_yields_empty_set():
    labels = _label_map(np.zeros((32, 32), dtype=np.int64))
    assert len(mask_to_boxes(labels, [1, 3, 4], min_area=1)) == 0


def test_single_square_hull_is_itself():
    classes = np.zeros((32, 32), dtype=np.int64)
    classes[5:15, 5:15] = 1
    boxes = mask_to_boxes(_label_map(classes), [1], min_area=1)
    assert _as_set(boxes) == {(1, 5.0, 5.0, 15.0, 15.0)}
    assert boxes[0].score is None


def test_min_area_filters_small_blobs():
    classes = np.zeros((20, 20), dtype=np.int64)
    classes[0, 0] = 1  # single pixel
    classes[5:10, 5:10] = 1  # 25 px
    boxes = mask_to_boxes(_label_map(classes), [1], min_area=12)
    assert _as_set(boxes) == {(1, 5.0, 5.0, 10.0, 10.0)}


def test_diagonal_touch_merges():
    classes = np.zeros((10, 10), dtype=np.int64)
    classes[2, 2] = 1
    classes[3, 3] = 1  # touches only diagonally
    boxes = mask_to_boxes(_label_map(classes), [1], min_area=1)
    assert len(boxes) == 1
    assert _as_set(boxes) == {(1, 2.0, 2.0, 4.0, 4.0)}


def test_ignored_pixels_belong_to_no_class():
    classes = np.zeros((10, 10), dtype=np.int64)
    classes[2:6, 2:6] = 1
    ignore = np.zeros((10, 10), dtype=bool)
    ignore[2:6, 4:6] = True  # right half of the blob ignored
    boxes = mask_to_boxes(_label_map(classes, ignore=ignore), [1], min_area=1)
    assert _as_set(boxes) == {(1, 2.0, 2.0, 4.0, 6.0)}


def test_rejects_out_of_range_class():
    labels = _label_map(np.zeros((8, 8), dtype=np.int64))
    with pytest.raises(DataError):
        mask_to_boxes(labels, [7], min_area=1)


@given(
    classes=hnp.arrays(np.int64, (64, 64), elements=st.integers(0, 2)),
    min_area=st.sampled_from([1, 3, 12]),
)
@settings(max_examples=30, deadline=None)
def test_matches_floodfill_oracle(classes, min_area):
    labels = _label_map(classes, class_count=3)
    got = _as_set(mask_to_boxes(labels, [1, 2], min_area=min_area))
    want = floodfill_boxes(classes, labels.ignore, [1, 2], min_area)
    assert got == want


@given(classes=hnp.arrays(np.int64, (48, 48), elements=st.integers(0, 2)))
@settings(max_examples=20, deadline=None)
def test_boxes_are_tight(classes):
    """Each box contains >= 1 pixel of its class and shrinking any side loses one."""
    labels = _label_map(classes, class_count=3)
    for b in mask_to_boxes(labels, [1, 2], min_area=1):
        x0, y0, x1, y1 = int(b.x_min), int(b.y_min), int(b.x_max), int(b.y_max)
        region = classes[y0:y1, x0:x1] == b.class_id
        assert region.any()
        assert region[0, :].any() and region[-1, :].any()
        assert region[:, 0].any() and region[:, -1].any()
