from __future__ import annotations

from datetime import date

import numpy as np
import pytest
from pydantic import ValidationError

from src.bodycomp.core_model import (
    BinaryMask,
    CtSlice,
    LabelMap,
    TissueClass,
    apply_soft_tissue_window,
    class_mask,
    dice,
    require_same_shape,
)
from src.bodycomp.errors import DimensionMismatchError


def make_slice(hu) -> CtSlice:
    return CtSlice(
        hu=np.asarray(hu), spacing_x=1.0, spacing_y=1.0, subject_id="S", scan_date=date(2020, 1, 1)
    )


def test_window_bounds_and_half_up_rounding():
    display = apply_soft_tissue_window(make_slice([[-125, 275, 75, -1024, 3071]]))
    assert display.tolist() == [[0, 255, 128, 0, 255]]
    assert display.dtype == np.uint8


def test_window_is_monotone_and_keeps_shape():
    hu = np.arange(-300, 400).reshape(7, 100)
    display = apply_soft_tissue_window(make_slice(hu))
    assert display.shape == hu.shape
    assert np.all(np.diff(display.ravel().astype(int)) >= 0)


def test_slice_rejects_out_of_range_hu():
    with pytest.raises(ValidationError):
        make_slice([[-1025, 0]])
    with pytest.raises(ValidationError):
        make_slice([[0, 3072]])


def test_slice_rejects_bad_spacing():
    with pytest.raises(ValidationError):
        CtSlice(hu=[[0]], spacing_x=0.0, spacing_y=1.0, subject_id="S", scan_date=date(2020, 1, 1))


def test_slice_grid_is_read_only():
    ct_slice = make_slice([[0, 1], [2, 3]])
    with pytest.raises(ValueError):
        ct_slice.hu[0, 0] = 5


def test_label_map_rejects_unknown_codes():
    with pytest.raises(ValidationError):
        LabelMap(labels=[[0, 14]])


def test_label_map_rejects_non_integral_codes():
    with pytest.raises(ValidationError, match="integers"):
        LabelMap(labels=[[0.0, 7.5]])
    with pytest.raises(ValidationError, match="integers"):
        LabelMap(labels=[[0.0, np.nan]])
    assert LabelMap(labels=np.array([[7.0, 10.0]])).labels.tolist() == [[7, 10]]


def test_dice_examples():
    a = BinaryMask(bits=[[1, 1, 1, 1, 0, 0]])
    b = BinaryMask(bits=[[0, 0, 1, 1, 1, 1]])
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.5
    assert dice(b, a) == 0.5
    disjoint = BinaryMask(bits=[[0, 0, 0, 0, 1, 1]])
    assert dice(BinaryMask(bits=[[1, 1, 0, 0, 0, 0]]), disjoint) == 0.0
    empty = BinaryMask.empty((1, 6))
    assert dice(empty, empty) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        dice(BinaryMask.empty((2, 2)), BinaryMask.empty((2, 3)))


def test_class_mask_examples():
    assert class_mask(LabelMap.empty((4, 4)), TissueClass.LIVER).is_empty()

    single = LabelMap(labels=[[7]])
    assert class_mask(single, TissueClass.MUSCLE).count() == 1

    checkerboard = LabelMap(labels=(np.indices((6, 6)).sum(axis=0) % 2) + 1)
    assert class_mask(checkerboard, TissueClass.SPLEEN).count() == 18


def test_class_masks_partition_the_grid():
    rng = np.random.default_rng(3)
    label_map = LabelMap(labels=rng.integers(0, 14, size=(20, 30)))
    total = sum(class_mask(label_map, tissue).count() for tissue in TissueClass)
    assert total == 20 * 30


def test_present_classes_ascending():
    label_map = LabelMap(labels=[[13, 0, 7], [7, 2, 13]])
    assert label_map.present_classes() == [
        TissueClass.RIGHT_KIDNEY,
        TissueClass.MUSCLE,
        TissueClass.BODY_MASK,
    ]


def test_require_same_shape():
    require_same_shape(LabelMap.empty((3, 3)), BinaryMask.empty((3, 3)))
    with pytest.raises(DimensionMismatchError):
        require_same_shape(LabelMap.empty((3, 3)), BinaryMask.empty((3, 4)))
