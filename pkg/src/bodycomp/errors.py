"""Exception hierarchy shared by the body composition library and CLI."""

from typing import Any, Optional


class BodyCompositionError(Exception):
    """Base class for every error raised by the library."""

    def to_summary(self) -> dict[str, Any]:
        """Machine-readable summary used for the CLI's stderr JSON."""
        return {"error": type(self).__name__, "message": str(self)}


class EmptyBodyError(BodyCompositionError):
    """No pixel of the slice reached the body threshold."""


class FcmError(BodyCompositionError):
    """Fuzzy c-means could not be run on the given data."""


class InsufficientDistinctValuesError(FcmError):
    """Fewer distinct intensities than requested clusters."""


class DegenerateClusterError(FcmError):
    """A cluster lost all of its weight or collapsed onto another one."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration

    def to_summary(self) -> dict[str, Any]:
        summary = super().to_summary()
        if self.iteration is not None:
            summary["iteration"] = self.iteration
        return summary


class MaskError(BodyCompositionError):
    """Invalid combination of masks or label maps."""


class DimensionMismatchError(MaskError):
    """Two grids that must be aligned have different shapes."""


class RegionOverlapError(MaskError):
    """The inner and outer wall regions overlap."""


class NoDonorLabelError(MaskError):
    """Nearest-label fill found no labeled pixel to copy from."""


class WallContourError(MaskError):
    """A wall contour label does not enclose any region."""


class EmptyTissueError(BodyCompositionError):
    """The requested tissue class has no pixels."""


class StatisticsError(BodyCompositionError):
    """Invalid input to a variability statistic."""


class PhantomError(BodyCompositionError):
    """A phantom specification cannot be rendered."""


class FormatError(BodyCompositionError):
    """A file could not be parsed."""


class SliceFormatError(FormatError):
    """Malformed slice payload or sidecar."""


class LabelMapFormatError(FormatError):
    """Malformed label-map graymap."""


class ManifestError(FormatError):
    """Malformed cohort manifest."""


class PipelineStageError(BodyCompositionError):
    """An error raised inside one stage of the slice pipeline."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause

    def to_summary(self) -> dict[str, Any]:
        return {
            "error": type(self.cause).__name__,
            "message": str(self.cause),
            "stage": self.stage,
        }


class CohortAnalysisError(BodyCompositionError):
    """The cohort run produced nothing to aggregate."""
