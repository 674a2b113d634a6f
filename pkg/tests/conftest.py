from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from src.bodycomp.core_model import CtSlice, LabelMap, TissueClass
from src.bodycomp.phantom_lab import (
    AnnulusShape,
    Compartment,
    EllipseShape,
    PhantomSpec,
    generate_phantom,
)

CENTER = (47.5, 47.5)


def ring(outer: float, inner: float) -> AnnulusShape:
    return AnnulusShape(center=CENTER, outer_semi_axes=(outer, outer), inner_semi_axes=(inner, inner))


def disc(radius: float) -> EllipseShape:
    return EllipseShape(center=CENTER, semi_axes=(radius, radius))


def fat_ring_spec(noise_sigma: float = 0.0, seed: int = 0) -> PhantomSpec:
    """Subcutaneous fat ring around a muscle core."""
    return PhantomSpec(
        width=96,
        height=96,
        spacing=0.9766,
        body_ellipse=disc(44),
        compartments=(
            Compartment(shape=ring(44, 34), tissue=TissueClass.SFT),
            Compartment(shape=disc(34), tissue=TissueClass.MUSCLE),
        ),
        noise_sigma=noise_sigma,
        seed=seed,
    )


def compartment_spec(noise_sigma: float = 0.0, seed: int = 0) -> PhantomSpec:
    """Nested compartments: SFT, muscle, outer wall, RFT, inner wall, VFT, liver."""
    return PhantomSpec(
        width=96,
        height=96,
        spacing=0.9766,
        body_ellipse=disc(44),
        compartments=(
            Compartment(shape=ring(44, 38), tissue=TissueClass.SFT),
            Compartment(shape=ring(38, 34), tissue=TissueClass.MUSCLE),
            Compartment(shape=ring(34, 31), tissue=TissueClass.OUTER_WALL),
            Compartment(shape=ring(31, 25), tissue=TissueClass.RFT),
            Compartment(shape=ring(25, 22), tissue=TissueClass.INNER_WALL),
            Compartment(shape=ring(22, 10), tissue=TissueClass.VFT),
            Compartment(shape=disc(10), tissue=TissueClass.LIVER),
        ),
        noise_sigma=noise_sigma,
        seed=seed,
        subject_id="S001",
        scan_date=date(2010, 3, 1),
    )


def source_maps(truth: LabelMap) -> tuple[LabelMap, LabelMap, LabelMap]:
    """Organ, muscle and wall maps cut from a ground-truth label map."""
    labels = truth.labels
    organ = np.where((labels >= 1) & (labels <= 6), labels, 0)
    muscle = np.where(labels == TissueClass.MUSCLE, labels, 0)
    wall = np.where(np.isin(labels, (TissueClass.INNER_WALL, TissueClass.OUTER_WALL)), labels, 0)
    return LabelMap(labels=organ), LabelMap(labels=muscle), LabelMap(labels=wall)


@pytest.fixture
def fat_ring_phantom() -> tuple[CtSlice, LabelMap]:
    return generate_phantom(fat_ring_spec())


@pytest.fixture
def compartment_phantom() -> tuple[CtSlice, LabelMap]:
    return generate_phantom(compartment_spec())


@pytest.fixture
def tiny_slice() -> CtSlice:
    return CtSlice(
        hu=np.array([[-1000, -100], [50, 75]], dtype=np.int16),
        spacing_x=0.9766,
        spacing_y=0.9766,
        subject_id="S000",
        scan_date=date(2012, 6, 30),
    )
