"""Per-tissue area and mean intensity."""

from datetime import date
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .core_model import CtSlice, LabelMap, TissueClass, require_same_shape
from .errors import EmptyTissueError


class TissueMeasurement(BaseModel):
    """Area and mean HU of one tissue on one scan."""

    model_config = ConfigDict(frozen=True)

    subject_id: str
    scan_date: date
    tissue: TissueClass
    area_mm2: float = Field(ge=0.0)
    mean_hu: Optional[float] = None  # None when pixel_count is 0
    pixel_count: int = Field(ge=0)


def tissue_area(label_map: LabelMap, tissue: TissueClass, spacing_x: float, spacing_y: float) -> float:
    """Pixel count of `tissue` times the pixel area in mm²."""
    if spacing_x <= 0 or spacing_y <= 0:
        raise ValueError(f"pixel spacing must be positive, got ({spacing_x}, {spacing_y})")
    count = int(np.count_nonzero(label_map.labels == int(tissue)))
    return count * spacing_x * spacing_y


def mean_intensity(ct_slice: CtSlice, label_map: LabelMap, tissue: TissueClass) -> float:
    """Mean raw HU over the pixels of `tissue`."""
    require_same_shape(ct_slice, label_map)
    values = ct_slice.hu[label_map.labels == int(tissue)]
    if values.size == 0:
        raise EmptyTissueError(f"empty tissue: no pixels of class {int(tissue)}")
    return float(values.astype(np.int64).sum() / values.size)


def measure_all(ct_slice: CtSlice, label_map: LabelMap) -> list[TissueMeasurement]:
    """One measurement per class present in the map, ascending by code."""
    require_same_shape(ct_slice, label_map)
    measurements = []
    for tissue in label_map.present_classes():
        count = int(np.count_nonzero(label_map.labels == int(tissue)))
        measurements.append(
            TissueMeasurement(
                subject_id=ct_slice.subject_id,
                scan_date=ct_slice.scan_date,
                tissue=tissue,
                area_mm2=tissue_area(label_map, tissue, ct_slice.spacing_x, ct_slice.spacing_y),
                mean_hu=mean_intensity(ct_slice, label_map, tissue),
                pixel_count=count,
            )
        )
    return measurements
