import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragsim.similarity import (LocalityCache, locality_observations, mean_rate, probe_cache, record_search,
                               reorder_clusters, result_clusters, semantic_drift, should_terminate,
                               validate_speculation)
from ragsim.vector_index import TopKResult, open_cursor, search, search_step, select_clusters


def _remember(index, cache, request_id, v, nprobe=12):
    extended = search(index, v, cache.k_cache, nprobe)
    record_search(cache, request_id, index.prepare_query(v), extended, result_clusters(index, extended),
                  select_clusters(index, v, nprobe))
    return extended


def test_probe_misses_outside_delta_and_for_other_requests(small_index):
    cache = LocalityCache(20)
    v = small_index.centroids[0]
    _remember(small_index, cache, 7, v)
    far = small_index.prepare_query(v + 10.0)
    assert probe_cache(cache, 7, far, 10, 1.0, small_index) is None
    assert probe_cache(cache, 8, small_index.prepare_query(v), 10, 1.0, small_index) is None


def test_probe_rescoring_is_exact(small_index):
    cache = LocalityCache(20)
    v = small_index.centroids[2]
    extended = _remember(small_index, cache, 0, v)
    v_prime = small_index.prepare_query(v + 0.001)
    probe = probe_cache(cache, 0, v_prime, 10, 1.0, small_index)
    assert probe is not None
    assert set(probe.seed.ids.tolist()) <= set(extended.ids.tolist())
    exact = TopKResult.from_candidates(
        probe.seed.ids, ((small_index.vectors_for(probe.seed.ids).astype(np.float64) - v_prime) ** 2).sum(axis=1), 10)
    assert probe.seed == exact


def test_probe_depth_is_bounded_by_k_cache(small_index):
    cache = LocalityCache(5)
    with pytest.raises(ValueError):
        probe_cache(cache, 0, small_index.centroids[0], 6, 1.0, small_index)


def test_record_requires_result_clusters_to_be_searched():
    with pytest.raises(ValueError):
        record_search(LocalityCache(), 0, [0.0], TopKResult.empty(), [3], [1, 2])


@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=15), st.floats(min_value=0.0, max_value=0.2),
       st.integers(min_value=0, max_value=2**16))
def test_seeded_reordered_search_equals_cold_search(small_index, topic, drift, seed):
    rng = np.random.default_rng(seed)
    v = small_index.centroids[topic] + rng.normal(0, 0.02, small_index.dim)
    v_prime = v + drift * rng.standard_normal(small_index.dim) / np.sqrt(small_index.dim)
    cache = LocalityCache(20)
    _remember(small_index, cache, 0, v)
    plan = select_clusters(small_index, v_prime, 12)
    probe = probe_cache(cache, 0, small_index.prepare_query(v_prime), 10, 10.0, small_index, plan)
    cursor = open_cursor(small_index, v_prime, 10, 12, seed=probe.seed)
    cursor.reorder_remaining(reorder_clusters(plan, probe.hints))
    search_step(small_index, cursor, 12)
    assert cursor.heap == search(small_index, v_prime, 10, 12)


def test_reorder_puts_held_then_searched_first():
    hints = (frozenset({5}), frozenset({5, 2, 9}))
    assert reorder_clusters([1, 2, 3, 5, 9], hints) == [5, 2, 9, 1, 3]
    assert reorder_clusters([1, 2], None) == [1, 2]
    with pytest.raises(ValueError):
        reorder_clusters([1, 1], hints)


def test_should_terminate(small_index):
    cursor = open_cursor(small_index, small_index.centroids[0], 5, 4)
    cursor.unchanged_streak = 3
    assert should_terminate(cursor, 3)
    assert not should_terminate(cursor, 4)
    assert not should_terminate(cursor, None)
    assert not should_terminate(cursor, float("inf"))


def test_validate_speculation_modes():
    final = TopKResult.from_entries([(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.4)])
    reordered = TopKResult.from_entries([(2, 0.1), (1, 0.2), (3, 0.3), (4, 0.4)])
    assert validate_speculation(final, final, 4).valid
    assert not validate_speculation(reordered, final, 4).valid
    assert validate_speculation(reordered, final, 4, mode="recall", threshold=1.0).valid
    swapped = TopKResult.from_entries([(1, 0.1), (2, 0.2), (3, 0.3), (9, 0.4)])
    outcome = validate_speculation(swapped, final, 4, mode="recall", threshold=0.9)
    assert outcome.overlap == pytest.approx(0.75) and outcome.kind == "mismatch"
    with pytest.raises(ValueError):
        validate_speculation(final, final, 4, mode="fuzzy")


def test_identical_queries_satisfy_every_locality_property(small_index):
    v = small_index.centroids[3]
    rates = mean_rate([locality_observations(small_index, v, v, 10, 20, 8)])
    assert rates == {"contained": 1.0, "held": 1.0, "searched": 1.0}
    assert mean_rate([]) == {"contained": 0.0, "held": 0.0, "searched": 0.0}


def test_semantic_drift_is_euclidean():
    assert semantic_drift([0.0, 0.0], [3.0, 4.0]) == pytest.approx(5.0)
