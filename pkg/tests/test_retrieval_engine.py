import pytest

from ragsim.retrieval_engine import (BatchItem, Origin, RetrievalEngine, RetrievalTask, SubStageBatch,
                                     cluster_cost_ms)
from ragsim.tiered_cache import TieredCache
from ragsim.types import CacheConfig, RetrievalCostModel
from ragsim.vector_index import SearchCursor, open_cursor, search

COST = RetrievalCostModel(per_vector_ns=1000.0, fast_speedup=4.0, fixed_call_us=0.0, per_cluster_us=0.0)


@pytest.fixture
def four_clusters(make_line_index):
    return make_line_index([(0, 100), (1, 100), (2, 100), (3, 100)])


def _task(index, request_id, plan, k=5, x=0.0):
    cursor = SearchCursor(query=index.prepare_query([x, 0.0]), plan=plan, k=k)
    return RetrievalTask(request_id, 0, 0, cursor)


def test_cluster_cost_scales_with_size_and_lane(four_clusters):
    assert cluster_cost_ms(four_clusters, COST, 0) == pytest.approx(0.1)
    assert cluster_cost_ms(four_clusters, COST, 0, "fast") == pytest.approx(0.025)


def test_batched_step_advances_each_request(four_clusters):
    engine = RetrievalEngine(four_clusters, COST)
    engine.submit(_task(four_clusters, 0, [0, 1]))
    engine.submit(_task(four_clusters, 1, [2, 3], x=2.0))
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, [0, 1]), BatchItem(1, 0, 0, [2])]))

    assert report.latency_ms == pytest.approx(0.3)
    assert report.slow_clusters == 3 and report.fast_clusters == 0
    assert [(r.request_id, r.complete) for r in report.items] == [(0, True), (1, False)]
    assert [t.request_id for t in engine.tasks] == [1]
    assert engine.task(1, 0).cursor.remaining == [3]


def test_cancelled_items_are_skipped(four_clusters):
    engine = RetrievalEngine(four_clusters, COST)
    engine.submit(_task(four_clusters, 0, [0, 1]))
    assert engine.cancel(0, 0)
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, [0])]))
    assert report.items == [] and report.latency_ms == 0.0


def test_cancelled_items_do_not_count_as_cache_accesses(four_clusters):
    cache = TieredCache.for_index(four_clusters, CacheConfig(capacity_gc=2, min_fast_clusters=1))
    cache.resident = {0, 2}
    engine = RetrievalEngine(four_clusters, COST, cache=cache)
    engine.submit(_task(four_clusters, 0, [0, 1]))
    engine.submit(_task(four_clusters, 1, [2, 3], x=2.0))
    assert engine.cancel(1, 0)
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, [0, 1]), BatchItem(1, 0, 0, [2, 3])]))
    assert [r.request_id for r in report.items] == [0]
    assert report.fast_clusters == 1 and report.slow_clusters == 1
    assert cache.hits == 1 and cache.misses == 1
    assert cache.freq.tolist() == [1.0, 1.0, 0.0, 0.0]


def test_duplicate_submission_is_rejected(four_clusters):
    engine = RetrievalEngine(four_clusters, COST)
    engine.submit(_task(four_clusters, 0, [0]))
    with pytest.raises(ValueError):
        engine.submit(_task(four_clusters, 0, [1]))


def test_fast_lane_runs_in_parallel_with_the_slow_lane(four_clusters):
    cache = TieredCache.for_index(four_clusters, CacheConfig(capacity_gc=2, min_fast_clusters=2))
    cache.resident = {0, 1}
    engine = RetrievalEngine(four_clusters, COST, cache=cache)
    engine.submit(_task(four_clusters, 0, [0, 1, 2]))
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, [0, 1, 2])]))
    assert report.fast_clusters == 2 and report.slow_clusters == 1
    assert report.fast_ms == pytest.approx(0.05)
    assert report.latency_ms == pytest.approx(0.1)
    assert cache.hits == 2 and cache.misses == 1


def test_single_resident_cluster_stays_on_the_slow_lane(four_clusters):
    cache = TieredCache.for_index(four_clusters, CacheConfig(capacity_gc=2, min_fast_clusters=2))
    cache.resident = {0}
    engine = RetrievalEngine(four_clusters, COST, cache=cache)
    engine.submit(_task(four_clusters, 0, [0, 1]))
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, [0, 1])]))
    assert report.fast_clusters == 0
    assert report.latency_ms == pytest.approx(0.2)
    # served by the slow lane, so not a fast-tier hit
    assert cache.hits == 0 and cache.misses == 2
    assert cache.hit_rate == 0.0


def test_lanes_do_not_change_results(small_index):
    query = small_index.centroids[4] + 0.01
    cache = TieredCache.for_index(small_index, CacheConfig(capacity_gc=8, min_fast_clusters=1))
    cache.resident = set(range(8))
    engine = RetrievalEngine(small_index, RetrievalCostModel(), cache=cache)
    cursor = open_cursor(small_index, query, 10, 12)
    engine.submit(RetrievalTask(0, 0, 0, cursor))
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, list(cursor.plan))]))
    assert report.items[0].heap == search(small_index, query, 10, 12)


def test_early_termination_marks_the_cursor_complete(small_index):
    query = small_index.centroids[1]
    exact = search(small_index, query, 10, 12)
    cursor = open_cursor(small_index, query, 10, 12, seed=exact)
    engine = RetrievalEngine(small_index, RetrievalCostModel(), termination_streak=3)
    engine.submit(RetrievalTask(0, 0, 0, cursor, Origin.SPECULATIVE))
    report = engine.step(SubStageBatch(items=[BatchItem(0, 0, 0, cursor.plan[:3])]))
    item = report.items[0]
    assert item.terminated and item.complete
    assert item.origin == Origin.SPECULATIVE
    assert item.heap == exact
    assert engine.tasks == []


def test_live_mode_matches_virtual_results(small_index):
    engines = [RetrievalEngine(small_index, RetrievalCostModel()),
               RetrievalEngine(small_index, RetrievalCostModel(), live=True, workers=2)]
    heaps = []
    for engine in engines:
        items = []
        for request_id in range(3):
            cursor = open_cursor(small_index, small_index.centroids[request_id], 10, 6)
            engine.submit(RetrievalTask(request_id, 0, 0, cursor))
            items.append(BatchItem(request_id, 0, 0, cursor.plan[:4]))
        report = engine.step(SubStageBatch(items=items))
        heaps.append([r.heap for r in report.items])
        engine.close()
    assert heaps[0] == heaps[1]
    assert report.wallclock_ms is not None
