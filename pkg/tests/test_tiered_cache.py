import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragsim.tiered_cache import ThroughputProfile, TieredCache, solve_memory_budget
from ragsim.types import CacheConfig
from ragsim.workload import zipf_probabilities

GIB = 2**30


def test_target_set_prefers_frequent_then_lower_ids():
    cache = TieredCache(np.ones(6), CacheConfig(capacity_gc=3))
    cache.record_access([4, 2])
    cache.record_access([4, 1])
    cache.record_access([5])
    assert cache.target_set() == [4, 1, 2]


def test_never_accessed_clusters_are_not_targeted():
    cache = TieredCache(np.ones(6), CacheConfig(capacity_gc=4))
    cache.record_access([3])
    assert cache.target_set() == [3]


def test_swaps_publish_after_their_transfer_time():
    config = CacheConfig(capacity_gc=2, update_interval=2, transfer_gbps=1.0)
    cache = TieredCache(np.full(4, 1e6), config)
    cache.record_access([0, 1])
    assert cache.maybe_update(0.0) == []
    cache.record_access([0])
    ops = cache.maybe_update(0.0)
    assert [(op.cluster_id, op.direction) for op in ops] == [(0, "in"), (1, "in")]
    # transfers are serialized over one link
    assert [op.completes_at for op in ops] == pytest.approx([1.0, 2.0])
    cache.publish(1.5)
    assert cache.resident == {0}
    cache.publish(2.0)
    assert cache.resident == {0, 1}
    assert cache.freq.tolist() == [1.0, 0.5, 0.0, 0.0]


def test_evicts_clusters_that_fall_out_of_the_target():
    cache = TieredCache(np.ones(3), CacheConfig(capacity_gc=1, update_interval=1, decay=0.0))
    cache.resident = {0}
    cache.record_access([2])
    ops = cache.maybe_update(5.0)
    assert ("out", 0) in [(op.direction, op.cluster_id) for op in ops]
    assert 0 not in cache.resident and 2 in cache.in_flight
    assert cache.swaps_in == 1 and cache.swaps_out == 1


@given(st.lists(st.lists(st.integers(min_value=0, max_value=19), max_size=6), min_size=1, max_size=40),
       st.integers(min_value=0, max_value=20))
def test_residency_never_exceeds_capacity(batches, capacity):
    cache = TieredCache(np.ones(20), CacheConfig(capacity_gc=capacity, update_interval=3))
    for now, batch in enumerate(batches):
        cache.maybe_update(float(now))
        cache.partition_batch(batch)
        cache.record_access(batch)
        assert len(cache.resident) + len(cache.in_flight) <= capacity
        assert not cache.resident & set(cache.in_flight)


def test_zipf_accesses_converge_to_the_popular_mass():
    n, gc = 256, 51
    probs = zipf_probabilities(n, 1.0)
    cache = TieredCache(np.full(n, 1000.0), CacheConfig(capacity_gc=gc, update_interval=50, min_fast_clusters=1))
    rng = np.random.default_rng(5)
    for step in range(3000):
        if step == 500:
            cache.reset_counters()
        batch = rng.choice(n, size=32, p=probs).tolist()
        cache.maybe_update(float(step))
        cache.partition_batch(batch)
        cache.record_access(batch)
    expected = probs[:gc].sum()
    assert expected == pytest.approx(0.738, abs=0.005)
    assert cache.hit_rate == pytest.approx(expected, abs=0.05)


def _profile():
    gen = pd.DataFrame({
        "kv_bytes": [1 * GIB, 2 * GIB, 4 * GIB],
        "rps": [8, 8, 8],
        "throughput": [100.0, 200.0, 200.0],
    })
    ret = pd.DataFrame({"rps": [8], "throughput": [150.0]})
    return ThroughputProfile(gen=gen, ret=ret, cluster_bytes=float(GIB))


def test_memory_budget_picks_the_smallest_balanced_kv_size():
    budget = solve_memory_budget(_profile(), 8, 8, total_mem=10 * GIB, model_bytes=2 * GIB)
    assert budget.kv_bytes == 2 * GIB
    assert budget.cache_bytes == 6 * GIB
    assert budget.capacity_gc == 6
    assert budget.throughput == pytest.approx(150.0)


def test_memory_budget_rejects_impossible_inputs():
    with pytest.raises(ValueError):
        solve_memory_budget(_profile(), 8, 8, total_mem=GIB, model_bytes=2 * GIB)
    with pytest.raises(ValueError):
        solve_memory_budget(_profile(), 8, 8, total_mem=2.5 * GIB, model_bytes=2 * GIB)


def test_profile_csv_round_trip_keeps_lookups(tmp_path):
    profile = _profile()
    profile.to_csv(tmp_path / "profile.csv")
    loaded = ThroughputProfile.from_csv(tmp_path / "profile.csv", float(GIB))
    assert loaded.t_gen(2 * GIB, 7) == pytest.approx(200.0)
    assert loaded.t_ret(100) == pytest.approx(150.0)


def test_profile_requires_monotone_generation_throughput():
    gen = pd.DataFrame({"kv_bytes": [1, 2], "rps": [1, 1], "throughput": [5.0, 4.0]})
    with pytest.raises(ValueError):
        ThroughputProfile(gen=gen, ret=pd.DataFrame({"rps": [1], "throughput": [1.0]}), cluster_bytes=1.0)
