from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from src.bodycomp.core_model import BinaryMask, LabelMap, TissueClass
from src.bodycomp.errors import DimensionMismatchError, NoDonorLabelError
from src.bodycomp.mask_postprocess import (
    DEFAULT_PRECEDENCE,
    FusionPolicy,
    connected_components,
    fuse_masks,
    nearest_label_fill,
    remove_small_components,
)


def flood_fill_count(bits: np.ndarray, connectivity: int) -> int:
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    seen = np.zeros_like(bits, dtype=bool)
    count = 0
    for start in zip(*np.nonzero(bits)):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            r, c = stack.pop()
            for dr, dc in steps:
                nr, nc = r + dr, c + dc
                if 0 <= nr < bits.shape[0] and 0 <= nc < bits.shape[1]:
                    if bits[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
    return count


def brute_force_fill(labels: np.ndarray, holes: np.ndarray) -> np.ndarray:
    donors = np.argwhere((labels != 0) & ~holes)
    donor_codes = labels[donors[:, 0], donors[:, 1]].astype(int)
    filled = labels.copy()
    for r, c in np.argwhere(holes):
        d2 = np.square(donors[:, 0] - r) + np.square(donors[:, 1] - c)
        nearest = d2 == d2.min()
        filled[r, c] = donor_codes[nearest].min()
    return filled


def block_map(shape: tuple[int, int], blocks: list[tuple[int, slice, slice]]) -> LabelMap:
    labels = np.zeros(shape, dtype=np.uint8)
    for code, rows, cols in blocks:
        labels[rows, cols] = code
    return LabelMap(labels=labels)


def test_connected_components_examples():
    assert connected_components(BinaryMask.empty((5, 5))).count == 0

    diagonal = BinaryMask(bits=[[1, 0], [0, 1]])
    assert connected_components(diagonal, connectivity=4).count == 2
    assert connected_components(diagonal, connectivity=8).count == 1


def test_connected_components_sizes_and_dense_ids():
    mask = BinaryMask(bits=[[1, 1, 0, 0], [0, 0, 0, 1], [1, 0, 0, 1]])
    labeling = connected_components(mask, connectivity=4)
    assert labeling.count == 3
    assert sorted(np.unique(labeling.ids).tolist()) == [0, 1, 2, 3]
    assert sorted(labeling.sizes.tolist()) == [1, 2, 2]


def test_connected_components_match_flood_fill():
    rng = np.random.default_rng(16)
    for _ in range(50):
        bits = rng.random((16, 16)) < 0.4
        for connectivity in (4, 8):
            labeling = connected_components(BinaryMask(bits=bits), connectivity=connectivity)
            assert labeling.count == flood_fill_count(bits, connectivity)
            assert labeling.sizes.sum() == bits.sum()


def test_small_component_boundary():
    label_map = block_map(
        (20, 20),
        [(1, slice(0, 4), slice(0, 6)), (1, slice(10, 15), slice(10, 15))],
    )
    cleaned, removed = remove_small_components(label_map, 25)
    assert removed.count() == 24
    assert np.all(cleaned.labels[0:4, 0:6] == 0)
    assert np.all(cleaned.labels[10:15, 10:15] == 1)


def test_small_components_are_per_class():
    # Two touching classes are separate components
    label_map = block_map((10, 10), [(2, slice(0, 5), slice(0, 5)), (3, slice(0, 5), slice(5, 7))])
    cleaned, removed = remove_small_components(label_map, 25)
    assert removed.count() == 10
    assert cleaned.present_classes() == [TissueClass.RIGHT_KIDNEY]


def test_background_map_is_untouched():
    cleaned, removed = remove_small_components(LabelMap.empty((6, 6)), 25)
    assert removed.is_empty()
    assert not cleaned.labels.any()


def test_min_size_one_is_identity():
    rng = np.random.default_rng(1)
    label_map = LabelMap(labels=rng.integers(0, 14, size=(15, 15)))
    cleaned, removed = remove_small_components(label_map, 1)
    assert removed.is_empty()
    assert np.array_equal(cleaned.labels, label_map.labels)


def test_fill_examples():
    adjacent = nearest_label_fill(LabelMap(labels=[[0, 7]]), BinaryMask(bits=[[1, 0]]))
    assert adjacent.labels.tolist() == [[7, 7]]

    tie = nearest_label_fill(LabelMap(labels=[[3, 0, 5]]), BinaryMask(bits=[[0, 1, 0]]))
    assert tie.labels.tolist() == [[3, 3, 5]]


def test_fill_without_donors():
    with pytest.raises(NoDonorLabelError):
        nearest_label_fill(LabelMap.empty((4, 4)), BinaryMask(bits=np.eye(4)))


def test_fill_matches_brute_force():
    rng = np.random.default_rng(32)
    for _ in range(100):
        labels = np.where(rng.random((32, 32)) < 0.05, rng.integers(1, 14, size=(32, 32)), 0)
        labels[rng.integers(0, 32), rng.integers(0, 32)] = rng.integers(1, 14)
        holes = np.zeros(1024, dtype=bool)
        holes[rng.choice(1024, size=20, replace=False)] = True
        holes = holes.reshape(32, 32)
        if not np.any((labels != 0) & ~holes):
            continue
        filled = nearest_label_fill(LabelMap(labels=labels), BinaryMask(bits=holes))
        assert np.array_equal(filled.labels, brute_force_fill(labels.astype(np.uint8), holes))


def test_remove_then_fill_leaves_no_gap():
    rng = np.random.default_rng(9)
    for _ in range(20):
        labels = rng.integers(0, 4, size=(24, 24))
        labels[:8, :8] = 5
        label_map = LabelMap(labels=labels)
        cleaned, removed = remove_small_components(label_map, 25)
        filled = nearest_label_fill(cleaned, removed)
        assert np.all(filled.labels[label_map.labels != 0] != 0)


def test_fusion_precedence_examples():
    shape = (1, 1)
    empty = LabelMap.empty(shape)

    def single(code: int) -> LabelMap:
        return LabelMap(labels=[[code]])

    assert fuse_masks(single(4), empty, empty, single(10), single(13)).labels[0, 0] == 4
    assert fuse_masks(empty, empty, empty, empty, single(13)).labels[0, 0] == 13
    assert fuse_masks(empty, empty, single(8), single(11), single(13)).labels[0, 0] == 8
    assert fuse_masks(empty, single(7), single(9), empty, empty).labels[0, 0] == 7


def test_fusion_matches_table_lookup():
    rng = np.random.default_rng(4)
    rank = {tissue: i for i, tissue in enumerate(DEFAULT_PRECEDENCE)}
    maps = [LabelMap(labels=rng.integers(0, 14, size=(10, 10))) for _ in range(5)]
    fused = fuse_masks(*maps)
    for r in range(10):
        for c in range(10):
            candidates = [int(m.labels[r, c]) for m in maps]
            best = min(candidates, key=lambda code: rank[TissueClass(code)])
            assert fused.labels[r, c] == best
            assert fused.labels[r, c] in candidates


def test_fusion_is_idempotent():
    rng = np.random.default_rng(8)
    fused = fuse_masks(*(LabelMap(labels=rng.integers(0, 14, size=(12, 12))) for _ in range(5)))
    empty = LabelMap.empty((12, 12))
    again = fuse_masks(fused, empty, empty, empty, empty)
    assert np.array_equal(again.labels, fused.labels)


def test_fusion_ignores_classes_missing_from_precedence():
    policy = FusionPolicy(precedence=(TissueClass.MUSCLE, TissueClass.BACKGROUND))
    fat = LabelMap(labels=[[10, 10]])
    muscle = LabelMap(labels=[[0, 7]])
    empty = LabelMap.empty((1, 2))
    fused = fuse_masks(empty, muscle, empty, fat, empty, policy)
    assert fused.labels.tolist() == [[0, 7]]


def test_fusion_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        fuse_masks(
            LabelMap.empty((2, 2)),
            LabelMap.empty((2, 2)),
            LabelMap.empty((2, 3)),
            LabelMap.empty((2, 2)),
            LabelMap.empty((2, 2)),
        )


def test_policy_validation():
    with pytest.raises(ValidationError):
        FusionPolicy(precedence=(TissueClass.MUSCLE, TissueClass.MUSCLE, TissueClass.BACKGROUND))
    with pytest.raises(ValidationError):
        FusionPolicy(precedence=(TissueClass.BACKGROUND, TissueClass.MUSCLE))
    with pytest.raises(ValidationError):
        FusionPolicy(min_component_size=0)
