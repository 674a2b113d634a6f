"""Shared image, label and mask types plus windowing and Dice."""

from datetime import date
from enum import IntEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import DimensionMismatchError

HU_MIN = -1024
HU_MAX = 3071

# Soft tissue display window (HU)
SOFT_TISSUE_WINDOW = (-125, 275)


class TissueClass(IntEnum):
    """Label codes of the 13 target structures plus background."""

    BACKGROUND = 0
    SPLEEN = 1
    RIGHT_KIDNEY = 2
    LEFT_KIDNEY = 3
    LIVER = 4
    STOMACH = 5
    AORTA = 6
    MUSCLE = 7
    INNER_WALL = 8
    OUTER_WALL = 9
    SFT = 10
    VFT = 11
    RFT = 12
    BODY_MASK = 13

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    TissueClass.BACKGROUND: "Background",
    TissueClass.SPLEEN: "Spleen",
    TissueClass.RIGHT_KIDNEY: "R. kidney",
    TissueClass.LEFT_KIDNEY: "L. kidney",
    TissueClass.LIVER: "Liver",
    TissueClass.STOMACH: "Stomach",
    TissueClass.AORTA: "Aorta",
    TissueClass.MUSCLE: "Muscle",
    TissueClass.INNER_WALL: "Inner wall",
    TissueClass.OUTER_WALL: "Outer wall",
    TissueClass.SFT: "SFT",
    TissueClass.VFT: "VFT",
    TissueClass.RFT: "RFT",
    TissueClass.BODY_MASK: "Body mask",
}

ORGAN_CLASSES = (
    TissueClass.SPLEEN,
    TissueClass.RIGHT_KIDNEY,
    TissueClass.LEFT_KIDNEY,
    TissueClass.LIVER,
    TissueClass.STOMACH,
    TissueClass.AORTA,
)
WALL_CLASSES = (TissueClass.INNER_WALL, TissueClass.OUTER_WALL)
FAT_CLASSES = (TissueClass.SFT, TissueClass.VFT, TissueClass.RFT)
MAX_CODE = max(TissueClass)


def _frozen_grid(value: object, dtype: type) -> np.ndarray:
    grid = np.array(value, dtype=dtype, copy=True)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    grid.setflags(write=False)
    return grid


class CtSlice(BaseModel):
    """One calibrated axial slice in Hounsfield units."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    hu: np.ndarray
    spacing_x: float = Field(gt=0.0)  # mm/pixel along columns
    spacing_y: float = Field(gt=0.0)  # mm/pixel along rows
    subject_id: str
    scan_date: date

    @field_validator("hu", mode="before")
    @classmethod
    def _check_hu(cls, value: object) -> np.ndarray:
        raw = np.asarray(value)
        if raw.size and not np.issubdtype(raw.dtype, np.integer):
            if not np.array_equal(raw, np.round(raw)):
                raise ValueError("HU values must be integers")
        grid = _frozen_grid(raw, np.int64)
        if grid.min() < HU_MIN or grid.max() > HU_MAX:
            raise ValueError(
                f"HU values must lie in [{HU_MIN}, {HU_MAX}], "
                f"got [{grid.min()}, {grid.max()}]"
            )
        grid = grid.astype(np.int16)
        grid.setflags(write=False)
        return grid

    @property
    def height(self) -> int:
        return self.hu.shape[0]

    @property
    def width(self) -> int:
        return self.hu.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.hu.shape

    @property
    def pixel_area_mm2(self) -> float:
        return self.spacing_x * self.spacing_y


class LabelMap(BaseModel):
    """Grid of TissueClass codes aligned to a CtSlice."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    labels: np.ndarray

    @field_validator("labels", mode="before")
    @classmethod
    def _check_labels(cls, value: object) -> np.ndarray:
        raw = np.asarray(value)
        if raw.dtype.kind not in "biuf":
            raise ValueError(f"label codes must be integers, got dtype {raw.dtype}")
        if raw.dtype.kind == "f" and not np.array_equal(raw, np.trunc(raw)):
            raise ValueError("label codes must be integers, got non-integral values")
        if raw.size and (raw.min() < 0 or raw.max() > MAX_CODE):
            raise ValueError(
                f"label codes must lie in [0, {int(MAX_CODE)}], "
                f"got [{raw.min()}, {raw.max()}]"
            )
        return _frozen_grid(raw, np.uint8)

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "LabelMap":
        return cls(labels=np.zeros(shape, dtype=np.uint8))

    @classmethod
    def from_mask(cls, mask: "BinaryMask", tissue: TissueClass) -> "LabelMap":
        return cls(labels=np.where(mask.bits, int(tissue), 0))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def present_classes(self) -> list[TissueClass]:
        """Non-background classes with at least one pixel, ascending."""
        return [TissueClass(int(c)) for c in np.unique(self.labels) if c != 0]


class BinaryMask(BaseModel):
    """Boolean grid aligned to a CtSlice."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    bits: np.ndarray

    @field_validator("bits", mode="before")
    @classmethod
    def _check_bits(cls, value: object) -> np.ndarray:
        return _frozen_grid(np.asarray(value) != 0, bool)

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(bits=np.zeros(shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()


def require_same_shape(*grids: CtSlice | LabelMap | BinaryMask) -> None:
    """Raise DimensionMismatchError unless all grids share one shape."""
    shapes = {grid.shape for grid in grids}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"grid dimensions differ: {sorted(shapes)}")


def apply_soft_tissue_window(ct_slice: CtSlice) -> np.ndarray:
    """Map HU to display values in [0, 255] through the soft tissue window.

    Values are clamped to [-125, 275], scaled by 255/400 and rounded half-up.
    Integer arithmetic keeps the half-up rounding exact.

    Args:
        ct_slice: The slice to window.

    Returns:
        A uint8 grid with the slice's dimensions.
    """
    low, high = SOFT_TISSUE_WINDOW
    clamped = np.clip(ct_slice.hu.astype(np.int64), low, high) - low
    span = high - low
    return ((clamped * 255 * 2 + span) // (2 * span)).astype(np.uint8)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap 2|a∩b| / (|a| + |b|); two empty masks score 1."""
    require_same_shape(a, b)
    total = a.count() + b.count()
    if total == 0:
        return 1.0
    overlap = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * overlap / total


def class_mask(label_map: LabelMap, tissue: TissueClass) -> BinaryMask:
    return BinaryMask(bits=label_map.labels == int(tissue))
