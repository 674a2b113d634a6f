"""Fuzzy c-means clustering of scalar intensities (fuzzifier 2)."""

import logging
from typing import Literal, Optional

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import (
    DegenerateClusterError,
    FcmError,
    InsufficientDistinctValuesError,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]


class FcmConfig(BaseModel):
    """Clustering parameters. The fuzzifier is fixed at 2."""

    model_config = ConfigDict(frozen=True)

    cluster_count: int = Field(2, ge=2)
    fuzzifier: Literal[2.0] = 2.0
    tolerance: float = Field(1e-4, ge=0.0)  # max centroid shift, HU
    max_iterations: int = Field(300, ge=1)
    initial_centroids: Optional[tuple[float, ...]] = None

    @model_validator(mode="after")
    def _check_initial_centroids(self) -> "FcmConfig":
        if self.initial_centroids is None:
            return self
        if len(self.initial_centroids) != self.cluster_count:
            raise ValueError(
                f"expected {self.cluster_count} initial centroids, "
                f"got {len(self.initial_centroids)}"
            )
        if any(b <= a for a, b in zip(self.initial_centroids, self.initial_centroids[1:])):
            raise ValueError("initial centroids must be strictly increasing")
        return self


class FcmState(BaseModel):
    """Converged (or capped) clustering state, centroids ascending."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    centroids: np.ndarray  # (C,)
    memberships: np.ndarray  # (N, C), rows sum to 1
    objective_trace: tuple[float, ...]
    iterations_run: int

    @property
    def cluster_count(self) -> int:
        return int(self.centroids.shape[0])

    def hard_labels(self) -> np.ndarray:
        """Index of the highest-membership cluster per pixel."""
        return np.argmax(self.memberships, axis=1)


def _as_vector(values: npt.ArrayLike) -> FloatArray:
    return np.asarray(values, dtype=np.float64).ravel()


def compute_memberships(intensities: npt.ArrayLike, centroids: npt.ArrayLike) -> FloatArray:
    """Fuzzifier-2 memberships m_k(x) = [sum_j d_k(x)^2 / d_j(x)^2]^-1.

    A pixel sitting exactly on a centroid gets membership 1 in that cluster.

    Args:
        intensities: Pixel intensities, any shape (flattened).
        centroids: C pairwise distinct cluster centroids.

    Returns:
        An (N, C) array whose rows sum to 1.
    """
    x = _as_vector(intensities)
    c = _as_vector(centroids)
    if c.size < 2:
        raise FcmError(f"at least 2 centroids are required, got {c.size}")
    if np.unique(c).size != c.size:
        raise DegenerateClusterError(f"duplicate centroids: {c.tolist()}")

    d2 = np.square(x[:, None] - c[None, :])
    on_centroid = d2 == 0.0
    singular = on_centroid.any(axis=1)

    memberships = np.zeros_like(d2)
    regular = ~singular
    if regular.any():
        d2r = d2[regular]
        ratios = d2r[:, :, None] / d2r[:, None, :]
        memberships[regular] = 1.0 / ratios.sum(axis=2)
    if singular.any():
        rows = np.flatnonzero(singular)
        memberships[rows, np.argmax(on_centroid[rows], axis=1)] = 1.0
    return memberships


def _weighted_centroids(x: FloatArray, memberships: FloatArray) -> FloatArray:
    weights = np.square(memberships)
    totals = weights.sum(axis=0)
    empty = np.flatnonzero(totals == 0.0)
    if empty.size:
        raise DegenerateClusterError(f"clusters {empty.tolist()} have zero total membership")
    return (weights * x[:, None]).sum(axis=0) / totals


def update_centroids(intensities: npt.ArrayLike, memberships: npt.ArrayLike) -> FloatArray:
    """Fuzzifier-2 weighted means c_k = sum m_k^2 x / sum m_k^2, ascending."""
    x = _as_vector(intensities)
    m = np.asarray(memberships, dtype=np.float64)
    return np.sort(_weighted_centroids(x, m))


def fcm_objective(
    intensities: npt.ArrayLike, memberships: npt.ArrayLike, centroids: npt.ArrayLike
) -> float:
    """L = sum_k sum_x m_k(x)^2 (x - c_k)^2."""
    x = _as_vector(intensities)
    m = np.asarray(memberships, dtype=np.float64)
    c = _as_vector(centroids)
    return float(np.sum(np.square(m) * np.square(x[:, None] - c[None, :])))


def initial_centroids(x: FloatArray, cluster_count: int) -> FloatArray:
    """Evenly spaced quantiles, falling back to a linear spread on heavy ties."""
    levels = (np.arange(cluster_count) + 0.5) / cluster_count
    centroids = np.quantile(x, levels)
    if np.any(np.diff(centroids) <= 0):
        centroids = np.linspace(x.min(), x.max(), cluster_count)
    return centroids


def fcm_cluster(intensities: npt.ArrayLike, config: FcmConfig, seed: int = 0) -> FcmState:
    """Alternate membership and centroid updates until the centroids settle.

    Initialization is deterministic, so `seed` only matters for future
    randomized initializations; it is accepted for API stability.

    Args:
        intensities: Pixel intensities to cluster.
        config: Cluster count, tolerance and iteration cap.
        seed: Unused with deterministic initialization.

    Returns:
        The final FcmState with ascending centroids.
    """
    x = _as_vector(intensities)
    distinct = np.unique(x).size
    if distinct < config.cluster_count:
        raise InsufficientDistinctValuesError(
            f"{distinct} distinct values cannot form {config.cluster_count} clusters"
        )

    if config.initial_centroids is not None:
        centroids = np.asarray(config.initial_centroids, dtype=np.float64)
    else:
        centroids = initial_centroids(x, config.cluster_count)

    memberships = compute_memberships(x, centroids)
    trace = [fcm_objective(x, memberships, centroids)]
    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        try:
            updated = update_centroids(x, memberships)
            shift = float(np.max(np.abs(updated - centroids)))
            centroids = updated
            memberships = compute_memberships(x, centroids)
        except DegenerateClusterError as exc:
            raise DegenerateClusterError(
                f"degenerate cluster at iteration {iteration}: {exc}", iteration=iteration
            ) from exc
        trace.append(fcm_objective(x, memberships, centroids))
        if shift < config.tolerance:
            break

    logger.debug(
        "FCM converged after %d iterations: centroids=%s objective=%.6g",
        iteration,
        np.round(centroids, 4).tolist(),
        trace[-1],
    )
    return FcmState(
        centroids=centroids,
        memberships=memberships,
        objective_trace=tuple(trace),
        iterations_run=iteration,
    )
