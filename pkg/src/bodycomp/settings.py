"""Runtime configuration with `.env` / environment overrides."""

import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from .fcm_engine import FcmConfig

# Load environment variables from .env file in the project root
PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
load_dotenv(PROJECT_ROOT / ".env")

ENV_PREFIX = "BODYCOMP_"


class PipelineSettings(BaseModel):
    """Defaults for the single-slice segmentation pipeline."""

    body_threshold_hu: float = -200.0
    membership_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    fat_reference_hu: float = -100.0
    fat_window_hu: tuple[float, float] = (-190.0, -30.0)
    fcm_tolerance: float = Field(1e-4, ge=0.0)
    fcm_max_iterations: int = Field(300, ge=1)
    min_component_size: int = Field(25, ge=1)

    def fcm_config(self) -> FcmConfig:
        return FcmConfig(
            cluster_count=2,
            tolerance=self.fcm_tolerance,
            max_iterations=self.fcm_max_iterations,
        )


class CohortSettings(BaseModel):
    """Defaults for pair selection and variability statistics."""

    target_interval_days: int = 730  # "two year gap"
    tolerance_days: int = Field(90, ge=0)
    intensity_offset: float = 1024.0
    cv_aggregate: Literal["mean", "rms"] = "mean"
    workers: int = Field(4, ge=1)


class Settings(BaseModel):
    pipeline: PipelineSettings = PipelineSettings()
    cohort: CohortSettings = CohortSettings()


def _env_overrides(model: type[BaseModel]) -> dict[str, object]:
    overrides: dict[str, object] = {}
    for name, field in model.model_fields.items():
        raw = os.environ.get(f"{ENV_PREFIX}{name.upper()}")
        if raw is None:
            continue
        if field.annotation == tuple[float, float]:
            overrides[name] = tuple(part.strip() for part in raw.split(","))
        else:
            overrides[name] = raw
    return overrides


def load_settings() -> Settings:
    """Resolve settings from defaults and BODYCOMP_* environment variables.

    Returns:
        The validated settings; invalid overrides raise pydantic.ValidationError.
    """
    return Settings(
        pipeline=PipelineSettings(**_env_overrides(PipelineSettings)),
        cohort=CohortSettings(**_env_overrides(CohortSettings)),
    )
