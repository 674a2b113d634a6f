"""Synthetic abdominal phantoms and measurement cohorts with known truth.

All randomness comes from numpy's PCG64 generator (`numpy.random.default_rng`)
seeded from the spec, so outputs are reproducible across platforms. Cohort
scan dates come from a seeded Faker instance.
"""

import math
from datetime import date, timedelta
from typing import Annotated, Literal, Optional, Union

import numpy as np
from faker import Faker
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .composition_metrics import TissueMeasurement
from .core_model import HU_MAX, HU_MIN, CtSlice, LabelMap, TissueClass
from .errors import PhantomError
from .longitudinal_stats import ScanRecord

# Library defaults, not measured values
AIR_HU = -1000.0
FAT_HU = -100.0
MUSCLE_HU = 50.0
ORGAN_HU = 55.0
DEFAULT_SPACING_MM = 0.9766

DEFAULT_COMPARTMENT_HU = {
    TissueClass.SFT: FAT_HU,
    TissueClass.VFT: FAT_HU,
    TissueClass.RFT: FAT_HU,
    TissueClass.MUSCLE: MUSCLE_HU,
    TissueClass.INNER_WALL: MUSCLE_HU,
    TissueClass.OUTER_WALL: MUSCLE_HU,
    TissueClass.BODY_MASK: MUSCLE_HU,
}

# Range of baseline scan dates for synthetic subjects
BASELINE_START = date(2005, 1, 1)
BASELINE_END = date(2015, 12, 31)


class EllipseShape(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["ellipse"] = "ellipse"
    center: tuple[float, float]  # (row, col) in pixels
    semi_axes: tuple[float, float] = Field(description="(row, col) semi-axes in pixels")

    def raster(self, shape: tuple[int, int]) -> np.ndarray:
        return _ellipse_raster(shape, self.center, self.semi_axes)


class AnnulusShape(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["annulus"] = "annulus"
    center: tuple[float, float]
    outer_semi_axes: tuple[float, float]
    inner_semi_axes: tuple[float, float]

    @model_validator(mode="after")
    def _check_axes(self) -> "AnnulusShape":
        if any(i >= o for i, o in zip(self.inner_semi_axes, self.outer_semi_axes)):
            raise ValueError("inner semi-axes must be smaller than outer semi-axes")
        return self

    def raster(self, shape: tuple[int, int]) -> np.ndarray:
        outer = _ellipse_raster(shape, self.center, self.outer_semi_axes)
        inner = _ellipse_raster(shape, self.center, self.inner_semi_axes)
        return outer & ~inner


Shape = Annotated[Union[EllipseShape, AnnulusShape], Field(discriminator="kind")]


def _ellipse_raster(
    shape: tuple[int, int], center: tuple[float, float], semi_axes: tuple[float, float]
) -> np.ndarray:
    if min(semi_axes) <= 0:
        raise PhantomError(f"semi-axes must be positive, got {semi_axes}")
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return (
        np.square((rows - center[0]) / semi_axes[0]) + np.square((cols - center[1]) / semi_axes[1])
    ) <= 1.0


class Compartment(BaseModel):
    model_config = ConfigDict(frozen=True)

    shape: Shape
    tissue: TissueClass
    mean_hu: Optional[float] = None  # falls back to DEFAULT_COMPARTMENT_HU / ORGAN_HU

    def resolved_hu(self) -> float:
        if self.mean_hu is not None:
            return self.mean_hu
        return DEFAULT_COMPARTMENT_HU.get(self.tissue, ORGAN_HU)


class PhantomSpec(BaseModel):
    """Declarative description of a 2-D abdominal phantom.

    The body ellipse is labeled body mask; compartments are painted over it
    in order, so later shapes carve earlier ones.
    """

    model_config = ConfigDict(frozen=True)

    width: int = Field(ge=1)
    height: int = Field(ge=1)
    spacing: float = Field(DEFAULT_SPACING_MM, gt=0.0)
    body_ellipse: EllipseShape
    body_hu: float = MUSCLE_HU
    compartments: tuple[Compartment, ...] = ()
    noise_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0
    subject_id: str = "PHANTOM"
    scan_date: date = date(2020, 1, 1)


class CohortSpec(BaseModel):
    """Generative model x_ij = mean + a_i + offset·[j = 2] + e_ij for one tissue."""

    model_config = ConfigDict(frozen=True)

    n_subjects: int = Field(ge=2)
    true_mean: float  # area, mm²
    sigma2_A: float = Field(ge=0.0)
    sigma2_w: float = Field(ge=0.0)
    session_offset: float = 0.0
    seed: int = 0
    tissue: TissueClass = TissueClass.MUSCLE
    intensity_mean: float = MUSCLE_HU
    intensity_sigma2_A: float = Field(4.0, ge=0.0)
    intensity_sigma2_w: float = Field(1.0, ge=0.0)
    interval_days: int = Field(730, ge=1)
    spacing: float = Field(DEFAULT_SPACING_MM, gt=0.0)


def generate_phantom(spec: PhantomSpec) -> tuple[CtSlice, LabelMap]:
    """Render the phantom's HU grid and its exact ground-truth label map."""
    shape = (spec.height, spec.width)
    body = spec.body_ellipse.raster(shape)
    if not body.any():
        raise PhantomError("body ellipse covers no pixel")

    labels = np.where(body, int(TissueClass.BODY_MASK), 0).astype(np.uint8)
    means = np.where(body, spec.body_hu, AIR_HU)
    for index, compartment in enumerate(spec.compartments):
        region = compartment.shape.raster(shape)
        if np.any(region & ~body):
            raise PhantomError(f"compartment {index} ({compartment.tissue.name}) leaves the body")
        labels[region] = int(compartment.tissue)
        means[region] = compartment.resolved_hu()

    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.noise_sigma, size=shape) if spec.noise_sigma > 0 else 0.0
    hu = np.clip(np.rint(means + noise), HU_MIN, HU_MAX).astype(np.int16)

    ct_slice = CtSlice(
        hu=hu,
        spacing_x=spec.spacing,
        spacing_y=spec.spacing,
        subject_id=spec.subject_id,
        scan_date=spec.scan_date,
    )
    return ct_slice, LabelMap(labels=labels)


def subject_id_for(index: int) -> str:
    return f"SUBJ{index:04d}"


def _draw_pairs(
    rng: np.random.Generator, n: int, mean: float, sigma2_a: float, sigma2_w: float, offset: float
) -> np.ndarray:
    subject_effect = rng.normal(0.0, math.sqrt(sigma2_a), size=n)
    within = rng.normal(0.0, math.sqrt(sigma2_w), size=(n, 2))
    return mean + subject_effect[:, None] + np.array([0.0, offset]) + within


def cohort_values(spec: CohortSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw (area, intensity) arrays of shape (n_subjects, 2)."""
    rng = np.random.default_rng(spec.seed)
    areas = _draw_pairs(
        rng, spec.n_subjects, spec.true_mean, spec.sigma2_A, spec.sigma2_w, spec.session_offset
    )
    intensities = _draw_pairs(
        rng,
        spec.n_subjects,
        spec.intensity_mean,
        spec.intensity_sigma2_A,
        spec.intensity_sigma2_w,
        0.0,
    )
    return areas, intensities


def cohort_scan_dates(spec: CohortSpec) -> list[tuple[date, date]]:
    fake = Faker()
    fake.seed_instance(spec.seed)
    dates = []
    for _ in range(spec.n_subjects):
        baseline = fake.date_between_dates(date_start=BASELINE_START, date_end=BASELINE_END)
        dates.append((baseline, baseline + timedelta(days=spec.interval_days)))
    return dates


def generate_cohort(spec: CohortSpec) -> list[tuple[ScanRecord, ScanRecord]]:
    """Synthetic scan pairs carrying one tissue measurement each.

    Generated areas are not tied to a pixel grid: `pixel_count` is the
    nearest whole number of pixels at the cohort's pixel spacing.
    """
    areas, intensities = cohort_values(spec)
    pixel_area = spec.spacing * spec.spacing
    pairs = []
    for index, scan_dates in enumerate(cohort_scan_dates(spec)):
        subject_id = subject_id_for(index)
        records = []
        for session, scan_date in enumerate(scan_dates):
            area = float(areas[index, session])
            measurement = TissueMeasurement(
                subject_id=subject_id,
                scan_date=scan_date,
                tissue=spec.tissue,
                area_mm2=max(area, 0.0),
                mean_hu=float(intensities[index, session]),
                pixel_count=max(int(round(area / pixel_area)), 0),
            )
            records.append(
                ScanRecord(subject_id=subject_id, scan_date=scan_date, measurements=(measurement,))
            )
        pairs.append((records[0], records[1]))
    return pairs


def muscle_block_phantom(
    subject_id: str,
    scan_date: date,
    muscle_pixels: int,
    muscle_hu: int,
    size: int = 512,
    spacing: float = DEFAULT_SPACING_MM,
) -> tuple[CtSlice, LabelMap]:
    """A fat-filled body with a muscle block of exactly `muscle_pixels` pixels.

    The block fills rows of a centered rectangle half the grid wide, so its
    pixel count (and hence area) is exact.

    Returns:
        The slice and a label map holding only the muscle block.
    """
    if muscle_pixels < 1:
        raise PhantomError(f"muscle block needs at least one pixel, got {muscle_pixels}")
    center = (size - 1) / 2.0
    body = _ellipse_raster((size, size), (center, center), (0.45 * size, 0.45 * size))

    block_width = max(size // 2, 1)
    full_rows, remainder = divmod(muscle_pixels, block_width)
    block_rows = full_rows + (1 if remainder else 0)
    top = int(round(center - block_rows / 2.0))
    left = int(round(center - block_width / 2.0))
    if top < 0 or top + block_rows > size:
        raise PhantomError(f"{muscle_pixels} muscle pixels do not fit a {size}x{size} phantom")
    block = np.zeros((size, size), dtype=bool)
    block[top : top + full_rows, left : left + block_width] = True
    if remainder:
        block[top + full_rows, left : left + remainder] = True
    if block.sum() != muscle_pixels or np.any(block & ~body):
        raise PhantomError(f"{muscle_pixels} muscle pixels do not fit a {size}x{size} phantom")

    hu = np.full((size, size), AIR_HU)
    hu[body] = FAT_HU
    hu[block] = muscle_hu
    ct_slice = CtSlice(
        hu=np.clip(hu, HU_MIN, HU_MAX).astype(np.int16),
        spacing_x=spacing,
        spacing_y=spacing,
        subject_id=subject_id,
        scan_date=scan_date,
    )
    muscle = LabelMap(labels=np.where(block, int(TissueClass.MUSCLE), 0))
    return ct_slice, muscle
