"""Small-component removal, nearest-label fill and precedence fusion."""

import logging
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from .core_model import BinaryMask, LabelMap, TissueClass, require_same_shape
from .errors import NoDonorLabelError

logger = logging.getLogger(__name__)

# Supervised sources above unsupervised ones: organs > muscle > walls > fat > body
DEFAULT_PRECEDENCE: tuple[TissueClass, ...] = (
    TissueClass.SPLEEN,
    TissueClass.RIGHT_KIDNEY,
    TissueClass.LEFT_KIDNEY,
    TissueClass.LIVER,
    TissueClass.STOMACH,
    TissueClass.AORTA,
    TissueClass.MUSCLE,
    TissueClass.INNER_WALL,
    TissueClass.OUTER_WALL,
    TissueClass.SFT,
    TissueClass.VFT,
    TissueClass.RFT,
    TissueClass.BODY_MASK,
    TissueClass.BACKGROUND,
)


class FusionPolicy(BaseModel):
    """Label precedence for overlapping sources and the refinement size cut."""

    model_config = ConfigDict(frozen=True)

    precedence: tuple[TissueClass, ...] = DEFAULT_PRECEDENCE
    min_component_size: int = Field(25, ge=1)

    @field_validator("precedence")
    @classmethod
    def _check_precedence(cls, value: tuple[TissueClass, ...]) -> tuple[TissueClass, ...]:
        if len(set(value)) != len(value):
            raise ValueError("precedence lists a class more than once")
        if not value or value[-1] != TissueClass.BACKGROUND:
            raise ValueError("precedence must end with background")
        return value


class ComponentLabeling(NamedTuple):
    ids: np.ndarray  # 0 background, components 1..n
    sizes: np.ndarray  # sizes[i] is the pixel count of component i + 1

    @property
    def count(self) -> int:
        return int(self.sizes.shape[0])


def connected_components(mask: BinaryMask, connectivity: Literal[4, 8] = 8) -> ComponentLabeling:
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    ids, count = ndimage.label(mask.bits, structure=structure)
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(ids=ids, sizes=sizes)


def remove_small_components(label_map: LabelMap, min_size: int) -> tuple[LabelMap, BinaryMask]:
    """Clear every 8-connected class component with fewer than `min_size` pixels.

    Returns:
        The cleaned map and a mask of the cleared pixels.
    """
    labels = label_map.labels.copy()
    removed = np.zeros(label_map.shape, dtype=bool)
    for tissue in label_map.present_classes():
        components = connected_components(BinaryMask(bits=labels == tissue), connectivity=8)
        small = np.flatnonzero(components.sizes < min_size) + 1
        if small.size == 0:
            continue
        cleared = np.isin(components.ids, small)
        removed |= cleared
        logger.debug("class %d: removed %d small components", int(tissue), small.size)
    labels[removed] = 0
    return LabelMap(labels=labels), BinaryMask(bits=removed)


def nearest_label_fill(label_map: LabelMap, holes: BinaryMask) -> LabelMap:
    """Give every hole pixel the class of its nearest labeled non-hole pixel.

    Distances are exact Euclidean pixel distances; equal distances resolve
    to the smallest class code.
    """
    require_same_shape(label_map, holes)
    labels = label_map.labels
    donors = (labels != 0) & ~holes.bits
    if not donors.any():
        raise NoDonorLabelError("no labeled pixel is available to fill from")
    if holes.is_empty():
        return label_map

    hole_rows, hole_cols = np.nonzero(holes.bits)
    best_d2 = np.full(hole_rows.shape, np.iinfo(np.int64).max, dtype=np.int64)
    best_label = np.zeros(hole_rows.shape, dtype=np.uint8)
    for code in np.unique(labels[donors]):
        # Nearest donor of this class for every pixel; integer d^2 is exact
        _, (near_rows, near_cols) = ndimage.distance_transform_edt(
            ~(donors & (labels == code)), return_indices=True
        )
        d2 = (
            np.square(hole_rows - near_rows[hole_rows, hole_cols].astype(np.int64))
            + np.square(hole_cols - near_cols[hole_rows, hole_cols].astype(np.int64))
        )
        closer = d2 < best_d2
        best_d2[closer] = d2[closer]
        best_label[closer] = code

    filled = labels.copy()
    filled[hole_rows, hole_cols] = best_label
    return LabelMap(labels=filled)


def fuse_masks(
    organ: LabelMap,
    muscle: LabelMap,
    wall: LabelMap,
    fat: LabelMap,
    body: LabelMap,
    policy: FusionPolicy = FusionPolicy(),
) -> LabelMap:
    """Per pixel, keep the source label ranked highest by the policy."""
    require_same_shape(organ, muscle, wall, fat, body)
    stacked = np.stack([m.labels for m in (organ, muscle, wall, fat, body)])

    unranked = len(policy.precedence)
    rank = np.full(int(max(TissueClass)) + 1, unranked, dtype=np.int64)
    for position, tissue in enumerate(policy.precedence):
        rank[int(tissue)] = position
    background_rank = rank[int(TissueClass.BACKGROUND)]

    ranks = rank[stacked]
    winner = np.argmin(ranks, axis=0)
    fused = np.take_along_axis(stacked, winner[None], axis=0)[0]
    fused[np.take_along_axis(ranks, winner[None], axis=0)[0] >= background_rank] = 0
    return LabelMap(labels=fused)
