from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from src.bodycomp.errors import (
    DegenerateClusterError,
    FcmError,
    InsufficientDistinctValuesError,
)
from src.bodycomp.fcm_engine import (
    FcmConfig,
    compute_memberships,
    fcm_cluster,
    fcm_objective,
    update_centroids,
)


def kmeans_1d_two_clusters(values: np.ndarray) -> tuple[float, float]:
    """Exhaustive 2-means in one dimension: try every split of the sorted data."""
    x = np.sort(values)
    n = x.size
    prefix = np.concatenate([[0.0], np.cumsum(x)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(np.square(x))])
    best, best_split = np.inf, 1
    for split in range(1, n):
        left_sse = prefix_sq[split] - prefix[split] ** 2 / split
        right_n = n - split
        right_sum = prefix[n] - prefix[split]
        right_sse = prefix_sq[n] - prefix_sq[split] - right_sum**2 / right_n
        if left_sse + right_sse < best:
            best, best_split = left_sse + right_sse, split
    return float(x[:best_split].mean()), float(x[best_split:].mean())


def test_membership_hand_examples():
    assert compute_memberships([10.0], [0.0, 30.0])[0].tolist() == [0.8, 0.2]
    assert compute_memberships([15.0], [0.0, 30.0])[0].tolist() == [0.5, 0.5]
    assert compute_memberships([0.0], [0.0, 30.0])[0].tolist() == [1.0, 0.0]


def test_membership_errors():
    with pytest.raises(FcmError):
        compute_memberships([1.0, 2.0], [0.0])
    with pytest.raises(DegenerateClusterError):
        compute_memberships([1.0, 2.0], [5.0, 5.0])


def test_centroid_update_examples():
    x = np.array([0.0, 10.0])
    assert update_centroids(x, [[1.0, 0.0], [0.0, 1.0]]).tolist() == [0.0, 10.0]
    assert update_centroids(x, [[0.8, 0.2], [0.8, 0.2]]).tolist() == pytest.approx([5.0, 5.0])
    assert update_centroids([1.0, 2.0, 6.0], [[1.0]] * 3).tolist() == [3.0]


def test_centroid_update_rejects_empty_cluster():
    with pytest.raises(DegenerateClusterError):
        update_centroids([1.0, 2.0], [[1.0, 0.0], [1.0, 0.0]])


def test_objective_examples():
    assert fcm_objective([0.0, 10.0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 10.0]) == 0.0
    assert fcm_objective([10.0], [[1.0]], [8.0]) == 4.0
    assert fcm_objective([10.0], [[0.8, 0.2]], [0.0, 30.0]) == pytest.approx(80.0)


def test_config_validation():
    with pytest.raises(ValidationError):
        FcmConfig(cluster_count=1)
    with pytest.raises(ValidationError):
        FcmConfig(fuzzifier=3.0)
    with pytest.raises(ValidationError):
        FcmConfig(cluster_count=2, initial_centroids=(1.0,))
    with pytest.raises(ValidationError):
        FcmConfig(cluster_count=2, initial_centroids=(5.0, 1.0))


def test_two_spikes_converge_exactly():
    x = np.concatenate([np.full(200, -100.0), np.full(200, 50.0)])
    state = fcm_cluster(x, FcmConfig())
    assert state.centroids.tolist() == [-100.0, 50.0]


def test_all_equal_intensities_rejected():
    with pytest.raises(InsufficientDistinctValuesError):
        fcm_cluster(np.full(50, 12.0), FcmConfig())


def test_bimodal_sample_matches_kmeans_oracle():
    rng = np.random.default_rng(7)
    x = np.concatenate([rng.normal(-100.0, 10.0, 5000), rng.normal(50.0, 10.0, 5000)])
    state = fcm_cluster(x, FcmConfig())
    oracle = kmeans_1d_two_clusters(x)
    assert state.centroids == pytest.approx(oracle, abs=3.0)
    assert state.centroids == pytest.approx([-100.0, 50.0], abs=3.0)


def test_invariants_over_random_datasets():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        cluster_count = int(rng.integers(2, 5))
        x = rng.normal(0.0, 50.0, size=int(rng.integers(cluster_count + 2, 60)))
        state = fcm_cluster(x, FcmConfig(cluster_count=cluster_count, max_iterations=50))

        assert np.allclose(state.memberships.sum(axis=1), 1.0, atol=1e-9, rtol=0.0)
        assert state.memberships.min() >= 0.0 and state.memberships.max() <= 1.0
        assert np.all(np.diff(state.centroids) > 0)
        trace = np.asarray(state.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9 * np.maximum(trace[:-1], 1.0))


def test_deterministic_and_order_independent():
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.normal(-90.0, 15.0, 300), rng.normal(40.0, 15.0, 300)])
    config = FcmConfig()

    first = fcm_cluster(x, config)
    second = fcm_cluster(x, config)
    assert np.array_equal(first.centroids, second.centroids)
    assert np.array_equal(first.memberships, second.memberships)
    assert first.objective_trace == second.objective_trace

    order = rng.permutation(x.size)
    shuffled = fcm_cluster(x[order], config)
    assert np.allclose(shuffled.centroids, first.centroids, atol=1e-6)
    assert np.allclose(shuffled.memberships, first.memberships[order], atol=1e-6)


def test_initial_centroids_are_used():
    x = np.array([0.0, 1.0, 2.0, 10.0, 11.0, 12.0])
    state = fcm_cluster(x, FcmConfig(initial_centroids=(0.0, 12.0), max_iterations=1))
    assert state.iterations_run == 1
    assert state.centroids[0] < 2.0 < 10.0 < state.centroids[1]


def test_hard_labels_follow_memberships():
    x = np.array([-100.0, -95.0, 45.0, 50.0])
    state = fcm_cluster(x, FcmConfig())
    assert state.hard_labels().tolist() == [0, 0, 1, 1]
