import functools
import json
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Annotated, Any, Optional, TypeVar

import pandas as pd
import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from src.bodycomp.composition_metrics import TissueMeasurement
from src.bodycomp.core_model import apply_soft_tissue_window
from src.bodycomp.errors import BodyCompositionError
from src.bodycomp.longitudinal_stats import VariabilityReport
from src.bodycomp.mask_postprocess import FusionPolicy
from src.bodycomp.phantom_lab import CohortSpec, PhantomSpec, generate_phantom
from src.bodycomp.pipeline import (
    dice_table,
    load_manifest,
    run_cohort_analysis,
    run_slice_pipeline,
    write_cohort_outputs,
    write_simulated_cohort,
)
from src.bodycomp.settings import load_settings
from src.bodycomp.slice_io import (
    read_label_map,
    read_slice,
    write_csv,
    write_label_map,
    write_preview,
    write_slice,
)

app = typer.Typer(
    help="Single-slice CT body composition and longitudinal variability.",
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)

# Logging
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

SettingsT = TypeVar("SettingsT", bound=BaseModel)


def reporting_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    """Turn library errors into a JSON summary on stderr and exit code 1."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except BodyCompositionError as e:
            summary = e.to_summary()
        except ValidationError as e:
            summary = {"error": "ValidationError", "message": str(e)}
        except OSError as e:
            summary = {"error": type(e).__name__, "message": str(e)}
        typer.echo(json.dumps(summary, sort_keys=True), err=True)
        raise typer.Exit(code=1)

    return wrapper


def with_overrides(section: SettingsT, **options: Any) -> SettingsT:
    """Validated copy of a settings section with the options given on the command line."""
    given = {name: value for name, value in options.items() if value is not None}
    return type(section).model_validate({**section.model_dump(), **given})


def display_measurements(measurements: list[TissueMeasurement]) -> None:
    table = Table(title="Tissue measurements")
    table.add_column("Class")
    table.add_column("Pixels", justify="right")
    table.add_column("Area (mm²)", justify="right")
    table.add_column("Mean HU", justify="right")
    for m in measurements:
        table.add_row(
            m.tissue.display_name,
            str(m.pixel_count),
            f"{m.area_mm2:.6g}",
            f"{m.mean_hu:.6g}" if m.mean_hu is not None else "-",
        )
    console.print(table)


def display_report(reports: list[VariabilityReport]) -> None:
    table = Table(title="Longitudinal variability")
    for column in ("Class", "Measure", "n", "ICC", "raw ICC", "CV (%)"):
        table.add_column(column, justify="left" if column in ("Class", "Measure") else "right")
    for r in reports:
        table.add_row(
            r.tissue.display_name,
            r.measure.value,
            str(r.n_subjects),
            f"{r.icc:.3f}",
            f"{r.raw_icc:.3f}",
            f"{r.cv_percent:.3f}",
        )
    console.print(table)


@app.callback()
def main(
    log_level: Annotated[
        str, typer.Option("--log-level", help=f"One of {', '.join(LOG_LEVELS)}.")
    ] = "WARNING",
):
    """Configure logging for every subcommand."""
    level = log_level.upper()
    if level not in LOG_LEVELS:
        raise typer.BadParameter(f"unknown log level {log_level!r}", param_hint="--log-level")
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@app.command()
@reporting_errors
def segment(
    slice_path: Annotated[Path, typer.Argument(help="Slice payload (.raw) with its .json sidecar.")],
    out_map: Annotated[Path, typer.Option(help="Where to write the fused label map (.pgm).")],
    organ: Annotated[Optional[Path], typer.Option(help="Organ label map (.pgm).")] = None,
    muscle: Annotated[Optional[Path], typer.Option(help="Muscle label map (.pgm).")] = None,
    wall: Annotated[Optional[Path], typer.Option(help="Wall contour label map (.pgm).")] = None,
    out_csv: Annotated[Optional[Path], typer.Option(help="Measurements CSV.")] = None,
    preview: Annotated[Optional[Path], typer.Option(help="Soft-tissue windowed preview (.pgm).")] = None,
    body_threshold: Annotated[Optional[float], typer.Option(help="Body mask threshold (HU). [default: -200]")] = None,
    min_component_size: Annotated[Optional[int], typer.Option(help="Smallest kept component (pixels). [default: 25]")] = None,
    membership_threshold: Annotated[Optional[float], typer.Option(help="Stage-B darker membership cut. [default: 0.5]")] = None,
):
    """Segment one slice, fuse all sources and measure every tissue."""
    settings = with_overrides(
        load_settings().pipeline,
        body_threshold_hu=body_threshold,
        min_component_size=min_component_size,
        membership_threshold=membership_threshold,
    )
    ct_slice = read_slice(slice_path)
    maps = [read_label_map(p) if p is not None else None for p in (organ, muscle, wall)]
    result = run_slice_pipeline(
        ct_slice,
        *maps,
        policy=FusionPolicy(min_component_size=settings.min_component_size),
        settings=settings,
    )
    write_label_map(result.fused, out_map)
    if out_csv is not None:
        frame = pd.DataFrame(
            [
                {
                    "subject_id": m.subject_id,
                    "scan_date": m.scan_date.isoformat(),
                    "class": m.tissue.display_name,
                    "pixel_count": m.pixel_count,
                    "area_mm2": m.area_mm2,
                    "mean_hu": m.mean_hu,
                }
                for m in result.measurements
            ],
            columns=["subject_id", "scan_date", "class", "pixel_count", "area_mm2", "mean_hu"],
        )
        write_csv(out_csv, frame)
    if preview is not None:
        write_preview(apply_soft_tissue_window(ct_slice), preview)
    display_measurements(result.measurements)


@app.command()
@reporting_errors
def cohort(
    manifest_path: Annotated[Path, typer.Argument(help="Cohort manifest (JSON).")],
    out_dir: Annotated[Path, typer.Option(help="Directory for the CSV reports.")],
    target_days: Annotated[Optional[int], typer.Option(help="Target follow-up interval (days). [default: 730]")] = None,
    tolerance_days: Annotated[Optional[int], typer.Option(help="Allowed deviation from the target (days). [default: 90]")] = None,
    intensity_offset: Annotated[Optional[float], typer.Option(help="Offset added to HU before intensity CV. [default: 1024]")] = None,
    cv_aggregate: Annotated[Optional[str], typer.Option(help="Across-subject CV aggregation: mean or rms. [default: mean]")] = None,
    workers: Annotated[Optional[int], typer.Option(help="Concurrent scan pipelines. [default: 4]")] = None,
    min_component_size: Annotated[Optional[int], typer.Option(help="Smallest kept component (pixels). [default: 25]")] = None,
):
    """Run every scan of a manifest and report ICC/CV per tissue."""
    settings = load_settings()
    cohort_settings = with_overrides(
        settings.cohort,
        target_interval_days=target_days,
        tolerance_days=tolerance_days,
        intensity_offset=intensity_offset,
        cv_aggregate=cv_aggregate,
        workers=workers,
    )
    pipeline_settings = with_overrides(settings.pipeline, min_component_size=min_component_size)
    manifest = load_manifest(manifest_path)
    analysis = run_cohort_analysis(manifest, cohort_settings, pipeline_settings)
    written = write_cohort_outputs(analysis, out_dir)
    display_report(analysis.reports)
    if analysis.failures:
        console.print(
            f"[yellow]{len(analysis.failures)} scan(s) failed and were excluded; "
            f"see {written[-1]}[/yellow]"
        )
    console.print(Panel.fit(f"Reports written to {out_dir}", style="bold green"))


@app.command()
@reporting_errors
def phantom(
    spec_path: Annotated[Path, typer.Argument(help="PhantomSpec (JSON).")],
    out_slice: Annotated[Path, typer.Option(help="Slice payload to write (.raw).")],
    out_truth: Annotated[Path, typer.Option(help="Ground-truth label map to write (.pgm).")],
    seed: Annotated[Optional[int], typer.Option(help="Noise seed; overrides the spec.")] = None,
):
    """Render a phantom slice and its ground-truth label map."""
    spec = PhantomSpec.model_validate_json(spec_path.read_text(encoding="utf-8"))
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    ct_slice, truth = generate_phantom(spec)
    write_slice(ct_slice, out_slice)
    write_label_map(truth, out_truth)
    console.print(f"Phantom {spec.width}x{spec.height} written to {out_slice}")


@app.command("simulate-cohort")
@reporting_errors
def simulate_cohort(
    spec_path: Annotated[Path, typer.Argument(help="CohortSpec (JSON).")],
    out_dir: Annotated[Path, typer.Option(help="Directory for slices, masks and manifest.")],
    seed: Annotated[Optional[int], typer.Option(help="Generator seed; overrides the spec.")] = None,
    size: Annotated[int, typer.Option(help="Slice width and height (pixels).")] = 512,
):
    """Write a synthetic cohort of phantom scans and its manifest."""
    spec = CohortSpec.model_validate_json(spec_path.read_text(encoding="utf-8"))
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    manifest_path = write_simulated_cohort(spec, out_dir, size=size)
    console.print(f"{spec.n_subjects} subjects written; manifest at {manifest_path}")


@app.command()
@reporting_errors
def dice(
    reference: Annotated[Path, typer.Argument(help="Reference label map (.pgm).")],
    candidate: Annotated[Path, typer.Argument(help="Candidate label map (.pgm).")],
    out_csv: Annotated[Optional[Path], typer.Option(help="Write the table as CSV.")] = None,
):
    """Per-class Dice between two label maps."""
    table = dice_table(read_label_map(reference), read_label_map(candidate))
    if out_csv is not None:
        write_csv(out_csv, table)
    rich_table = Table(title="Dice")
    for column in table.columns:
        rich_table.add_column(str(column))
    for row in table.itertuples(index=False):
        rich_table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(rich_table)


if __name__ == "__main__":
    app()
