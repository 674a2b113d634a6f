"""Follow-up pair selection, two-way mixed ICC, CV and report tables."""

import logging
from collections import defaultdict
from collections.abc import Collection, Iterable, Mapping, Sequence
from datetime import date
from enum import StrEnum
from typing import Literal, NamedTuple, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .composition_metrics import TissueMeasurement
from .core_model import TissueClass
from .errors import StatisticsError

logger = logging.getLogger(__name__)

# "+1024" shift that keeps intensity means positive
INTENSITY_CV_OFFSET = 1024.0

SPAGHETTI_COLUMNS = ["subject_id", "value_scan1", "value_scan2"]


class Measure(StrEnum):
    AREA = "area"
    INTENSITY = "intensity"


class ScanRecord(BaseModel):
    """All tissue measurements of one subject's scan."""

    model_config = ConfigDict(frozen=True)

    subject_id: str
    scan_date: date
    measurements: tuple[TissueMeasurement, ...] = ()

    def value(self, tissue: TissueClass, measure: Measure) -> Optional[float]:
        for m in self.measurements:
            if m.tissue == tissue and m.pixel_count > 0:
                return m.area_mm2 if measure == Measure.AREA else m.mean_hu
        return None


class FollowupPair(BaseModel):
    """A subject's first two scans."""

    model_config = ConfigDict(frozen=True)

    subject_id: str
    first: ScanRecord
    second: ScanRecord
    interval_days: int

    @model_validator(mode="after")
    def _check_order(self) -> "FollowupPair":
        if self.first.scan_date >= self.second.scan_date:
            raise ValueError("first scan must precede the second")
        if self.interval_days != (self.second.scan_date - self.first.scan_date).days:
            raise ValueError("interval_days does not match the scan dates")
        return self

    @classmethod
    def from_records(cls, first: ScanRecord, second: ScanRecord) -> "FollowupPair":
        return cls(
            subject_id=first.subject_id,
            first=first,
            second=second,
            interval_days=(second.scan_date - first.scan_date).days,
        )


class AnovaDecomposition(BaseModel):
    """Subjects × sessions mean squares and the derived variance components."""

    model_config = ConfigDict(frozen=True)

    ms_between: float = Field(ge=0.0)
    ms_error: float = Field(ge=0.0)
    sigma2_A: float
    sigma2_w: float
    k: int


class IccResult(NamedTuple):
    decomposition: AnovaDecomposition
    raw_icc: float
    icc: float


class VariabilityReport(BaseModel):
    """One row of the ICC/CV table."""

    model_config = ConfigDict(frozen=True)

    tissue: TissueClass
    measure: Measure
    icc: float = Field(ge=0.0, le=1.0)
    raw_icc: float
    cv_percent: float = Field(ge=0.0)
    n_subjects: int = Field(ge=2)
    n_excluded: int = Field(0, ge=0)


def select_followup_pairs(
    records: Iterable[ScanRecord], target_interval_days: int = 730, tolerance_days: int = 90
) -> list[FollowupPair]:
    """Pair each subject's two earliest scans when their gap matches the target."""
    by_subject: dict[str, list[ScanRecord]] = defaultdict(list)
    for record in records:
        by_subject[record.subject_id].append(record)

    pairs = []
    excluded = 0
    for subject_id in sorted(by_subject):
        scans = sorted(by_subject[subject_id], key=lambda r: r.scan_date)
        dates = [s.scan_date for s in scans]
        if len(set(dates)) != len(dates):
            raise StatisticsError(f"subject {subject_id} has two scans on the same date")
        if len(scans) < 2:
            excluded += 1
            continue
        pair = FollowupPair.from_records(scans[0], scans[1])
        if abs(pair.interval_days - target_interval_days) > tolerance_days:
            excluded += 1
            continue
        pairs.append(pair)
    logger.info("selected %d follow-up pairs, excluded %d subjects", len(pairs), excluded)
    return pairs


def _as_pairs(values: npt.ArrayLike) -> np.ndarray:
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 2:
        raise StatisticsError(f"expected per-subject pairs (n, 2), got shape {data.shape}")
    return data


def icc_two_way_mixed(values: npt.ArrayLike) -> IccResult:
    """Consistency ICC(3,1) from a subjects × sessions two-way ANOVA.

    Args:
        values: (n, k) array, one row per subject; k = 2 for scan pairs.

    Returns:
        The ANOVA decomposition, the raw ICC and the ICC clamped at 0.
    """
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 2:
        raise StatisticsError(f"expected (n, k >= 2) measurements, got shape {data.shape}")
    n, k = data.shape
    if n < 2:
        raise StatisticsError(f"ICC needs at least 2 subjects, got {n}")

    subject_means = data.mean(axis=1)
    session_means = data.mean(axis=0)
    # Identical sessions then leave residuals of exactly zero
    grand = session_means.mean()
    ms_between = k * float(np.sum(np.square(subject_means - grand))) / (n - 1)
    residuals = data - subject_means[:, None] - session_means[None, :] + grand
    ms_error = float(np.sum(np.square(residuals))) / ((n - 1) * (k - 1))

    denominator = ms_between + (k - 1) * ms_error
    raw_icc = 1.0 if denominator == 0.0 else (ms_between - ms_error) / denominator
    decomposition = AnovaDecomposition(
        ms_between=ms_between,
        ms_error=ms_error,
        sigma2_A=(ms_between - ms_error) / k,
        sigma2_w=ms_error,
        k=k,
    )
    return IccResult(decomposition=decomposition, raw_icc=raw_icc, icc=max(raw_icc, 0.0))


def coefficient_of_variation(
    values: npt.ArrayLike,
    offset: float = 0.0,
    aggregate: Literal["mean", "rms"] = "mean",
) -> float:
    """Within-subject CV in percent, averaged over subjects.

    Each subject's CV is the sample standard deviation over the mean of its
    offset-shifted measurements. `aggregate="rms"` reports the root mean
    square of the per-subject CVs instead of their mean.
    """
    data = _as_pairs(values) + offset
    if data.shape[0] == 0:
        raise StatisticsError("CV needs at least one subject")
    means = data.mean(axis=1)
    if np.any(means <= 0):
        raise StatisticsError(
            f"non-positive shifted mean ({means.min():.6g}); increase the offset"
        )
    per_subject = data.std(axis=1, ddof=1) / means * 100.0
    if aggregate == "rms":
        return float(np.sqrt(np.mean(np.square(per_subject))))
    return float(np.mean(per_subject))


def _paired_values(
    pairs: Sequence[FollowupPair],
    tissue: TissueClass,
    measure: Measure,
    excluded_subjects: Collection[str] = (),
) -> tuple[list[str], np.ndarray, int]:
    subjects, rows, skipped = [], [], 0
    for pair in sorted(pairs, key=lambda p: p.subject_id):
        first = pair.first.value(tissue, measure)
        second = pair.second.value(tissue, measure)
        if pair.subject_id in excluded_subjects or first is None or second is None:
            skipped += 1
            continue
        subjects.append(pair.subject_id)
        rows.append((first, second))
    return subjects, np.asarray(rows, dtype=np.float64).reshape(-1, 2), skipped


def _reported_classes(pairs: Sequence[FollowupPair]) -> list[TissueClass]:
    seen = {m.tissue for p in pairs for r in (p.first, p.second) for m in r.measurements}
    return sorted(t for t in seen if t != TissueClass.BACKGROUND)


def omitted_classes(
    pairs: Sequence[FollowupPair],
    excluded_subjects: Optional[Mapping[TissueClass, Collection[str]]] = None,
) -> dict[TissueClass, int]:
    """Classes seen in the cohort but usable for fewer than 2 subjects."""
    excluded_subjects = excluded_subjects or {}
    omitted = {}
    for tissue in _reported_classes(pairs):
        subjects, _, _ = _paired_values(
            pairs, tissue, Measure.AREA, excluded_subjects.get(tissue, ())
        )
        if len(subjects) < 2:
            omitted[tissue] = len(subjects)
    return omitted


def cohort_variability_report(
    pairs: Sequence[FollowupPair],
    intensity_offset: float = INTENSITY_CV_OFFSET,
    cv_aggregate: Literal["mean", "rms"] = "mean",
    excluded_subjects: Optional[Mapping[TissueClass, Collection[str]]] = None,
) -> list[VariabilityReport]:
    """Area and intensity ICC/CV per tissue class, ordered by class then measure.

    Subjects missing a class on either scan, or listed for that class in
    `excluded_subjects`, are left out of that class and counted in
    `n_excluded`. Classes with fewer than 2 usable subjects are omitted.
    """
    if not pairs:
        raise StatisticsError("no follow-up pairs to analyse")
    excluded_subjects = excluded_subjects or {}
    reports = []
    for tissue in _reported_classes(pairs):
        for measure in (Measure.AREA, Measure.INTENSITY):
            subjects, values, skipped = _paired_values(
                pairs, tissue, measure, excluded_subjects.get(tissue, ())
            )
            if len(subjects) < 2:
                if measure == Measure.AREA:
                    logger.warning(
                        "class %s omitted: %d usable subjects, %d excluded",
                        tissue.display_name,
                        len(subjects),
                        skipped,
                    )
                continue
            icc = icc_two_way_mixed(values)
            offset = intensity_offset if measure == Measure.INTENSITY else 0.0
            reports.append(
                VariabilityReport(
                    tissue=tissue,
                    measure=measure,
                    icc=icc.icc,
                    raw_icc=icc.raw_icc,
                    cv_percent=coefficient_of_variation(values, offset, cv_aggregate),
                    n_subjects=len(subjects),
                    n_excluded=skipped,
                )
            )
    return reports


def report_frame(reports: Sequence[VariabilityReport]) -> pd.DataFrame:
    """The report as a table with columns class, measure, n, raw_icc, icc, cv_percent."""
    return pd.DataFrame(
        [
            {
                "class": r.tissue.display_name,
                "measure": r.measure.value,
                "n": r.n_subjects,
                "raw_icc": r.raw_icc,
                "icc": r.icc,
                "cv_percent": r.cv_percent,
            }
            for r in reports
        ],
        columns=["class", "measure", "n", "raw_icc", "icc", "cv_percent"],
    )


def spaghetti_data(
    pairs: Sequence[FollowupPair],
    tissue: TissueClass,
    measure: Measure,
    excluded_subjects: Collection[str] = (),
) -> pd.DataFrame:
    """Per-subject (first, second) values for a longitudinal line plot."""
    subjects, values, _ = _paired_values(pairs, tissue, measure, excluded_subjects)
    return pd.DataFrame(
        {
            "subject_id": subjects,
            "value_scan1": values[:, 0],
            "value_scan2": values[:, 1],
        },
        columns=SPAGHETTI_COLUMNS,
    )


def flag_spaghetti_outliers(table: pd.DataFrame, k: float = 1.5) -> pd.DataFrame:
    """Add an `outlier` column: change outside the Tukey fences of all changes."""
    flagged = table.copy()
    change = flagged["value_scan2"] - flagged["value_scan1"]
    if change.empty:
        flagged["outlier"] = pd.Series(dtype=bool)
        return flagged
    q1, q3 = np.percentile(change.to_numpy(), [25, 75])
    spread = k * (q3 - q1)
    flagged["outlier"] = (change < q1 - spread) | (change > q3 + spread)
    return flagged
