"""Unsupervised body mask and fat segmentation, and fat compartment partition."""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from .core_model import BinaryMask, CtSlice, require_same_shape
from .errors import EmptyBodyError, RegionOverlapError
from .fcm_engine import FcmConfig, FcmState, fcm_cluster

logger = logging.getLogger(__name__)

# Defaults (HU); not taken from any published protocol
DEFAULT_BODY_THRESHOLD_HU = -200.0
DEFAULT_MEMBERSHIP_THRESHOLD = 0.5
DEFAULT_FAT_REFERENCE_HU = -100.0
DEFAULT_FAT_WINDOW_HU = (-190.0, -30.0)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class FatSegmentationResult(BaseModel):
    """Outputs of the unsupervised branch for one slice."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    body_mask: BinaryMask
    fat_mask: BinaryMask
    sft: BinaryMask
    vft: BinaryMask
    rft: BinaryMask
    fcm_state: FcmState
    refinement_state: Optional[FcmState] = None


def largest_component(bits: np.ndarray) -> np.ndarray:
    """Largest 8-connected component; ties go to the first in scan order."""
    labeled, count = ndimage.label(bits, structure=EIGHT_CONNECTED)
    if count == 0:
        return np.zeros_like(bits, dtype=bool)
    sizes = np.bincount(labeled.ravel())[1:]
    return labeled == int(np.argmax(sizes)) + 1


def extract_body_mask(
    ct_slice: CtSlice, threshold_hu: float = DEFAULT_BODY_THRESHOLD_HU
) -> BinaryMask:
    """Threshold, keep the largest component and fill its enclosed holes."""
    foreground = ct_slice.hu >= threshold_hu
    if not foreground.any():
        raise EmptyBodyError(f"empty body: no pixel at or above {threshold_hu} HU")
    body = ndimage.binary_fill_holes(largest_component(foreground))
    return BinaryMask(bits=body)


def _select_fat_clusters(
    centroids: np.ndarray, fat_reference_hu: float, fat_window_hu: tuple[float, float]
) -> np.ndarray:
    low, high = fat_window_hu
    inside = np.flatnonzero((centroids >= low) & (centroids <= high))
    if inside.size:
        return inside
    return np.array([int(np.argmin(np.abs(centroids - fat_reference_hu)))])


def _segment_fat_stages(
    ct_slice: CtSlice,
    body: BinaryMask,
    config: FcmConfig,
    membership_threshold: float,
    fat_reference_hu: float,
    fat_window_hu: tuple[float, float],
) -> tuple[BinaryMask, FcmState, Optional[FcmState]]:
    require_same_shape(ct_slice, body)
    if body.is_empty():
        raise EmptyBodyError("empty body: body mask has no pixels")
    two_clusters = config.model_copy(update={"cluster_count": 2})
    if two_clusters.initial_centroids is not None and len(two_clusters.initial_centroids) != 2:
        two_clusters = two_clusters.model_copy(update={"initial_centroids": None})

    values = ct_slice.hu[body.bits].astype(np.float64)

    # Stage A: darker vs brighter inside the body
    stage_a = fcm_cluster(values, two_clusters)
    darker = stage_a.memberships[:, 0] > membership_threshold
    logger.debug(
        "stage A centroids=%s, %d darker pixels",
        np.round(stage_a.centroids, 3).tolist(),
        int(darker.sum()),
    )

    keep = np.zeros_like(darker)
    stage_b: Optional[FcmState] = None
    subset = values[darker]
    if subset.size and np.unique(subset).size < 2:
        keep = darker
    elif subset.size:
        # Stage B: cluster the darker pixels and keep the fat-like clusters
        stage_b = fcm_cluster(subset, two_clusters)
        chosen = _select_fat_clusters(stage_b.centroids, fat_reference_hu, fat_window_hu)
        kept_subset = np.isin(stage_b.hard_labels(), chosen)
        keep[np.flatnonzero(darker)[kept_subset]] = True
        logger.debug(
            "stage B centroids=%s, kept clusters %s",
            np.round(stage_b.centroids, 3).tolist(),
            chosen.tolist(),
        )

    fat = np.zeros(ct_slice.shape, dtype=bool)
    fat[body.bits] = keep
    return BinaryMask(bits=fat), stage_a, stage_b


def segment_fat(
    ct_slice: CtSlice,
    body: BinaryMask,
    config: FcmConfig,
    membership_threshold: float = DEFAULT_MEMBERSHIP_THRESHOLD,
    fat_reference_hu: float = DEFAULT_FAT_REFERENCE_HU,
    fat_window_hu: tuple[float, float] = DEFAULT_FAT_WINDOW_HU,
) -> tuple[BinaryMask, FcmState]:
    """Two-stage fuzzy c-means fat detection inside the body.

    Stage A splits body pixels into darker and brighter clusters. Stage B
    re-clusters the pixels whose darker membership exceeds the threshold and
    keeps the clusters whose centroids fall in the adipose window (or, if
    none does, the one nearest the fat reference).

    Args:
        ct_slice: Source slice.
        body: Body mask from extract_body_mask.
        config: FCM parameters; the cluster count is forced to 2.
        membership_threshold: Darker-membership cut for stage B.
        fat_reference_hu: Fallback reference for stage-B selection.
        fat_window_hu: Adipose HU range for stage-B selection.

    Returns:
        The fat mask and the stage-A clustering state.
    """
    fat, stage_a, _ = _segment_fat_stages(
        ct_slice, body, config, membership_threshold, fat_reference_hu, fat_window_hu
    )
    return fat, stage_a


def partition_fat(
    fat: BinaryMask,
    body: BinaryMask,
    inner_wall_region: BinaryMask,
    outer_wall_region: BinaryMask,
) -> tuple[BinaryMask, BinaryMask, BinaryMask]:
    """Split fat into (SFT, VFT, RFT) using the filled wall regions."""
    require_same_shape(fat, body, inner_wall_region, outer_wall_region)
    inner = inner_wall_region.bits
    outer = outer_wall_region.bits
    overlap = int(np.count_nonzero(inner & outer))
    if overlap:
        raise RegionOverlapError(f"inner and outer wall regions overlap on {overlap} pixels")
    vft = fat.bits & inner
    rft = fat.bits & outer
    sft = fat.bits & body.bits & ~(inner | outer)
    return BinaryMask(bits=sft), BinaryMask(bits=vft), BinaryMask(bits=rft)


def segment_tissues(
    ct_slice: CtSlice,
    inner_wall_region: BinaryMask,
    outer_wall_region: BinaryMask,
    config: FcmConfig,
    threshold_hu: float = DEFAULT_BODY_THRESHOLD_HU,
    membership_threshold: float = DEFAULT_MEMBERSHIP_THRESHOLD,
    fat_reference_hu: float = DEFAULT_FAT_REFERENCE_HU,
    fat_window_hu: tuple[float, float] = DEFAULT_FAT_WINDOW_HU,
    exclude: Optional[BinaryMask] = None,
) -> FatSegmentationResult:
    """Body mask, fat mask and fat compartments for one slice.

    `exclude` marks pixels owned by supervised structures (organs, muscle,
    walls); they are removed from the fat before it is partitioned.
    """
    body = extract_body_mask(ct_slice, threshold_hu)
    fat, stage_a, stage_b = _segment_fat_stages(
        ct_slice, body, config, membership_threshold, fat_reference_hu, fat_window_hu
    )
    inner = BinaryMask(bits=inner_wall_region.bits & body.bits)
    outer = BinaryMask(bits=outer_wall_region.bits & body.bits)
    partitioned = fat
    if exclude is not None:
        require_same_shape(fat, exclude)
        partitioned = BinaryMask(bits=fat.bits & ~exclude.bits)
    sft, vft, rft = partition_fat(partitioned, body, inner, outer)
    return FatSegmentationResult(
        body_mask=body,
        fat_mask=fat,
        sft=sft,
        vft=vft,
        rft=rft,
        fcm_state=stage_a,
        refinement_state=stage_b,
    )
