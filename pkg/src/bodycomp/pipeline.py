"""Slice pipeline, cohort manifest ingestion and cohort analysis."""

import asyncio
import logging
from collections.abc import Coroutine, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from datetime import date
from pathlib import Path
from typing import Any, Literal, NamedTuple, Optional, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import ndimage

from .composition_metrics import TissueMeasurement, measure_all
from .core_model import (
    ORGAN_CLASSES,
    WALL_CLASSES,
    BinaryMask,
    CtSlice,
    LabelMap,
    TissueClass,
    class_mask,
    dice,
    require_same_shape,
)
from .errors import (
    BodyCompositionError,
    CohortAnalysisError,
    ManifestError,
    NoDonorLabelError,
    PipelineStageError,
    WallContourError,
)
from .longitudinal_stats import (
    Measure,
    ScanRecord,
    VariabilityReport,
    cohort_variability_report,
    flag_spaghetti_outliers,
    omitted_classes,
    report_frame,
    select_followup_pairs,
    spaghetti_data,
)
from .mask_postprocess import FusionPolicy, fuse_masks, nearest_label_fill, remove_small_components
from .phantom_lab import CohortSpec, cohort_scan_dates, cohort_values, muscle_block_phantom, subject_id_for
from .settings import CohortSettings, PipelineSettings
from .slice_io import read_label_map, read_slice, write_csv, write_json, write_label_map, write_slice
from .tissue_segmentation import segment_tissues

logger = logging.getLogger(__name__)

T = TypeVar("T")

SourceName = Literal["organ", "muscle", "wall"]

# Classes produced by each supervised source
SOURCE_CLASSES: dict[str, tuple[TissueClass, ...]] = {
    "organ": ORGAN_CLASSES,
    "muscle": (TissueClass.MUSCLE,),
    "wall": WALL_CLASSES,
}

REPORT_FILE = "variability_report.csv"
SUMMARY_FILE = "run_summary.json"
SPAGHETTI_DIR = "spaghetti"
# Stage recorded for a scan that failed outside any known stage
UNEXPECTED_STAGE = "unexpected"


class ManifestEntry(BaseModel):
    subject_id: str
    scan_date: date
    slice_path: Path
    organ_mask_path: Optional[Path] = None
    muscle_mask_path: Optional[Path] = None
    wall_mask_path: Optional[Path] = None


class CohortManifest(BaseModel):
    """Scans of a cohort plus per-source held-out subject exclusions."""

    entries: list[ManifestEntry]
    held_out_exclusions: dict[SourceName, list[str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_unique_scans(self) -> "CohortManifest":
        keys = [(e.subject_id, e.scan_date) for e in self.entries]
        duplicates = sorted({k for k in keys if keys.count(k) > 1})
        if duplicates:
            raise ValueError(f"duplicate (subject_id, scan_date) entries: {duplicates}")
        return self

    def class_exclusions(self) -> dict[TissueClass, set[str]]:
        exclusions: dict[TissueClass, set[str]] = {}
        for source, subjects in self.held_out_exclusions.items():
            for tissue in SOURCE_CLASSES[source]:
                exclusions.setdefault(tissue, set()).update(subjects)
        return exclusions


def load_manifest(path: Path) -> CohortManifest:
    """Read a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        manifest = CohortManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"{path}: manifest not found") from exc
    except ValidationError as exc:
        raise ManifestError(f"{path}: invalid manifest: {exc}") from exc

    base = path.parent

    def resolve(p: Optional[Path]) -> Optional[Path]:
        return p if p is None or p.is_absolute() else base / p

    entries = [
        entry.model_copy(
            update={
                "slice_path": resolve(entry.slice_path),
                "organ_mask_path": resolve(entry.organ_mask_path),
                "muscle_mask_path": resolve(entry.muscle_mask_path),
                "wall_mask_path": resolve(entry.wall_mask_path),
            }
        )
        for entry in manifest.entries
    ]
    return manifest.model_copy(update={"entries": entries})


class SliceResult(NamedTuple):
    fused: LabelMap
    measurements: list[TissueMeasurement]


class ScanFailure(BaseModel):
    subject_id: str
    scan_date: date
    stage: str
    message: str


class CohortAnalysis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    reports: list[VariabilityReport]
    spaghetti: dict[str, pd.DataFrame]  # keyed by "<class>_<measure>"
    failures: list[ScanFailure]
    summary: dict[str, object]


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except PipelineStageError:
        raise
    except (BodyCompositionError, ValueError) as exc:
        raise PipelineStageError(name, exc) from exc


def wall_regions(wall_map: LabelMap) -> tuple[BinaryMask, BinaryMask]:
    """Fill the inner (8) and outer (9) wall contours into cavity regions.

    A nested outer region gives up the pixels already in the inner region.
    """
    regions = []
    for tissue in WALL_CLASSES:
        contour = wall_map.labels == int(tissue)
        filled = ndimage.binary_fill_holes(contour)
        if contour.any() and not np.any(filled & ~contour):
            raise WallContourError(f"{tissue.display_name} contour does not close")
        regions.append(filled)
    inner, outer = regions
    return BinaryMask(bits=inner), BinaryMask(bits=outer & ~inner)


def _refine(label_map: LabelMap, min_size: int, source: str) -> LabelMap:
    cleaned, removed = remove_small_components(label_map, min_size)
    if removed.is_empty():
        return cleaned
    try:
        return nearest_label_fill(cleaned, removed)
    except NoDonorLabelError:
        logger.warning("%s map has no labels left after refinement; keeping it cleared", source)
        return cleaned


def run_slice_pipeline(
    ct_slice: CtSlice,
    organ_map: Optional[LabelMap] = None,
    muscle_map: Optional[LabelMap] = None,
    wall_map: Optional[LabelMap] = None,
    policy: FusionPolicy = FusionPolicy(),
    settings: PipelineSettings = PipelineSettings(),
) -> SliceResult:
    """Segment, refine, fuse and measure one slice.

    Stages run in order: body mask, fat segmentation, fat partition,
    small-component removal and nearest-label fill per source, fusion,
    measurement. Errors are re-raised as PipelineStageError tagged with
    the failing stage.

    Args:
        ct_slice: The slice to analyse.
        organ_map: Supervised organ labels (1-6), empty when missing.
        muscle_map: Supervised muscle labels (7), empty when missing.
        wall_map: Inner/outer wall contour labels (8, 9), empty when missing.
        policy: Fusion precedence and minimum component size.
        settings: Thresholds and FCM parameters.

    Returns:
        The fused label map and its per-class measurements.
    """
    empty = LabelMap.empty(ct_slice.shape)
    organ_map = empty if organ_map is None else organ_map
    muscle_map = empty if muscle_map is None else muscle_map
    wall_map = empty if wall_map is None else wall_map

    with _stage("ingest_masks"):
        require_same_shape(ct_slice, organ_map, muscle_map, wall_map)
        inner_region, outer_region = wall_regions(wall_map)
        supervised = (organ_map.labels != 0) | (muscle_map.labels != 0) | (wall_map.labels != 0)

    with _stage("segment_fat"):
        result = segment_tissues(
            ct_slice,
            inner_region,
            outer_region,
            settings.fcm_config(),
            threshold_hu=settings.body_threshold_hu,
            membership_threshold=settings.membership_threshold,
            fat_reference_hu=settings.fat_reference_hu,
            fat_window_hu=settings.fat_window_hu,
            exclude=BinaryMask(bits=supervised),
        )

    fat_labels = np.zeros(ct_slice.shape, dtype=np.uint8)
    for tissue, mask in (
        (TissueClass.SFT, result.sft),
        (TissueClass.VFT, result.vft),
        (TissueClass.RFT, result.rft),
    ):
        fat_labels[mask.bits] = int(tissue)
    sources = {
        "organ": organ_map,
        "muscle": muscle_map,
        "wall": wall_map,
        "fat": LabelMap(labels=fat_labels),
        "body": LabelMap.from_mask(result.body_mask, TissueClass.BODY_MASK),
    }

    with _stage("refine_masks"):
        refined = {
            name: _refine(label_map, policy.min_component_size, name)
            for name, label_map in sources.items()
        }

    with _stage("fuse_masks"):
        fused = fuse_masks(
            refined["organ"],
            refined["muscle"],
            refined["wall"],
            refined["fat"],
            refined["body"],
            policy,
        )

    with _stage("measure"):
        measurements = measure_all(ct_slice, fused)
    logger.info(
        "%s %s: %d tissue classes measured",
        ct_slice.subject_id,
        ct_slice.scan_date.isoformat(),
        len(measurements),
    )
    return SliceResult(fused=fused, measurements=measurements)


def _process_entry(
    entry: ManifestEntry, policy: FusionPolicy, settings: PipelineSettings
) -> ScanRecord:
    with _stage("read_inputs"):
        ct_slice = read_slice(entry.slice_path)
        maps = [
            read_label_map(p) if p is not None else None
            for p in (entry.organ_mask_path, entry.muscle_mask_path, entry.wall_mask_path)
        ]
        if (ct_slice.subject_id, ct_slice.scan_date) != (entry.subject_id, entry.scan_date):
            # The manifest is authoritative for identity
            logger.warning(
                "%s: sidecar identifies %s %s, manifest says %s %s",
                entry.slice_path,
                ct_slice.subject_id,
                ct_slice.scan_date,
                entry.subject_id,
                entry.scan_date,
            )
    result = run_slice_pipeline(ct_slice, *maps, policy=policy, settings=settings)
    return ScanRecord(
        subject_id=entry.subject_id,
        scan_date=entry.scan_date,
        measurements=tuple(result.measurements),
    )


def _record_failure(entry: ManifestEntry, exc: Exception) -> ScanFailure:
    if isinstance(exc, PipelineStageError):
        stage, message = exc.stage, str(exc.cause)
    elif isinstance(exc, OSError):
        stage, message = "read_inputs", str(exc)
    else:
        stage, message = UNEXPECTED_STAGE, f"{type(exc).__name__}: {exc}"
    logger.warning(
        "scan %s %s failed in %s: %s",
        entry.subject_id,
        entry.scan_date,
        stage,
        message,
        exc_info=stage == UNEXPECTED_STAGE,
    )
    return ScanFailure(
        subject_id=entry.subject_id, scan_date=entry.scan_date, stage=stage, message=message
    )


async def _process_all(
    entries: Sequence[ManifestEntry],
    policy: FusionPolicy,
    settings: PipelineSettings,
    workers: int,
) -> list[ScanRecord | ScanFailure]:
    semaphore = asyncio.Semaphore(workers)

    async def run_one(entry: ManifestEntry) -> ScanRecord | ScanFailure:
        async with semaphore:
            try:
                return await asyncio.to_thread(_process_entry, entry, policy, settings)
            except Exception as exc:
                return _record_failure(entry, exc)

    return await asyncio.gather(*(run_one(entry) for entry in entries))


def _run_batch(batch: Coroutine[Any, Any, T]) -> T:
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(batch)
    # asyncio.run cannot nest inside a running loop
    logger.debug("event loop already running; processing the batch on a helper thread")
    with ThreadPoolExecutor(max_workers=1) as executor:
        return executor.submit(asyncio.run, batch).result()


def run_cohort_analysis(
    manifest: CohortManifest,
    cohort_settings: CohortSettings = CohortSettings(),
    pipeline_settings: PipelineSettings = PipelineSettings(),
    policy: Optional[FusionPolicy] = None,
) -> CohortAnalysis:
    """Run every scan, pair follow-ups and compute the variability tables.

    Failed scans are recorded and skipped; the run aborts only when no scan
    succeeds.
    """
    policy = policy or FusionPolicy(min_component_size=pipeline_settings.min_component_size)
    entries = sorted(manifest.entries, key=lambda e: (e.subject_id, e.scan_date))
    outcomes = _run_batch(_process_all(entries, policy, pipeline_settings, cohort_settings.workers))

    records = [o for o in outcomes if isinstance(o, ScanRecord)]
    failures = [o for o in outcomes if isinstance(o, ScanFailure)]
    if not records:
        raise CohortAnalysisError(f"all {len(entries)} scans failed")

    pairs = select_followup_pairs(
        records, cohort_settings.target_interval_days, cohort_settings.tolerance_days
    )
    exclusions = manifest.class_exclusions()
    reports = (
        cohort_variability_report(
            pairs,
            intensity_offset=cohort_settings.intensity_offset,
            cv_aggregate=cohort_settings.cv_aggregate,
            excluded_subjects=exclusions,
        )
        if pairs
        else []
    )

    spaghetti = {}
    for report in reports:
        table = spaghetti_data(
            pairs, report.tissue, report.measure, exclusions.get(report.tissue, ())
        )
        key = f"{report.tissue.name.lower()}_{report.measure.value}"
        spaghetti[key] = flag_spaghetti_outliers(table)

    summary = {
        "scans_attempted": len(entries),
        "scans_succeeded": len(records),
        "failures": [f.model_dump(mode="json") for f in failures],
        "pairs_selected": len(pairs),
        "subjects_without_pair": len({r.subject_id for r in records}) - len(pairs),
        "omitted_classes": {
            t.display_name: n for t, n in omitted_classes(pairs, exclusions).items()
        }
        if pairs
        else {},
    }
    logger.info(
        "cohort analysis: %d/%d scans, %d pairs, %d report rows",
        len(records),
        len(entries),
        len(pairs),
        len(reports),
    )
    return CohortAnalysis(reports=reports, spaghetti=spaghetti, failures=failures, summary=summary)


def write_cohort_outputs(analysis: CohortAnalysis, out_dir: Path) -> list[Path]:
    """Write the report CSV, spaghetti CSVs and run summary atomically."""
    out_dir = Path(out_dir)
    written = [out_dir / REPORT_FILE]
    write_csv(written[0], report_frame(analysis.reports))
    for key in sorted(analysis.spaghetti):
        path = out_dir / SPAGHETTI_DIR / f"{key}.csv"
        write_csv(path, analysis.spaghetti[key])
        written.append(path)
    summary_path = out_dir / SUMMARY_FILE
    write_json(summary_path, analysis.summary)
    written.append(summary_path)
    return written


def dice_table(reference: LabelMap, candidate: LabelMap) -> pd.DataFrame:
    """Per-class Dice between two label maps, one row per class in either map."""
    require_same_shape(reference, candidate)
    classes = sorted(set(reference.present_classes()) | set(candidate.present_classes()))
    rows = []
    for tissue in classes:
        ref_mask = class_mask(reference, tissue)
        cand_mask = class_mask(candidate, tissue)
        rows.append(
            {
                "class": int(tissue),
                "name": tissue.display_name,
                "reference_pixels": ref_mask.count(),
                "candidate_pixels": cand_mask.count(),
                "dice": dice(ref_mask, cand_mask),
            }
        )
    return pd.DataFrame(
        rows, columns=["class", "name", "reference_pixels", "candidate_pixels", "dice"]
    )


def write_simulated_cohort(spec: CohortSpec, out_dir: Path, size: int = 512) -> Path:
    """Render a CohortSpec as phantom scans plus a manifest.

    Each scan's muscle block holds round(area / pixel area) pixels at the
    generated intensity, so the pipeline recovers the generated areas up to
    pixel quantisation.

    Returns:
        Path of the written manifest.
    """
    out_dir = Path(out_dir)
    areas, intensities = cohort_values(spec)
    pixel_area = spec.spacing * spec.spacing
    entries = []
    for index, scan_dates in enumerate(cohort_scan_dates(spec)):
        subject_id = subject_id_for(index)
        for session, scan_date in enumerate(scan_dates):
            stem = f"{subject_id}_{scan_date.isoformat()}"
            ct_slice, muscle = muscle_block_phantom(
                subject_id,
                scan_date,
                muscle_pixels=max(int(round(areas[index, session] / pixel_area)), 1),
                muscle_hu=int(round(intensities[index, session])),
                size=size,
                spacing=spec.spacing,
            )
            write_slice(ct_slice, out_dir / "slices" / f"{stem}.raw")
            write_label_map(muscle, out_dir / "muscle" / f"{stem}.pgm")
            entries.append(
                ManifestEntry(
                    subject_id=subject_id,
                    scan_date=scan_date,
                    slice_path=Path("slices") / f"{stem}.raw",
                    muscle_mask_path=Path("muscle") / f"{stem}.pgm",
                )
            )
    manifest_path = out_dir / "manifest.json"
    write_json(manifest_path, CohortManifest(entries=entries).model_dump(mode="json"))
    return manifest_path
