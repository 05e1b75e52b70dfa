import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragsim.types import Metric
from ragsim.vector_index import (IvfIndex, SearchCursor, TopKResult, brute_force_search, build_index, merge_topk,
                                 open_cursor, recall_at_k, search, search_clusters, search_step, select_clusters,
                                 train_kmeans)


def test_kmeans_is_deterministic_for_a_seed(small_corpus):
    a = train_kmeans(small_corpus.vectors, 8, max_iters=5, seed=7)
    b = train_kmeans(small_corpus.vectors, 8, max_iters=5, seed=7)
    assert a.shape == (8, small_corpus.dim)
    assert np.array_equal(a, b)


def test_kmeans_rejects_more_clusters_than_points():
    with pytest.raises(ValueError):
        train_kmeans(np.zeros((3, 2)), 4)


def test_every_vector_lands_in_its_nearest_list(small_corpus, small_index):
    assert small_index.cluster_sizes().sum() == len(small_corpus)
    for c in range(small_index.n_clusters):
        vectors = small_index.list_vectors[c].astype(np.float64)
        if len(vectors) == 0:
            continue
        dists = ((vectors[:, None, :] - small_index.centroids[None, :, :]) ** 2).sum(axis=2)
        assert (dists.argmin(axis=1) == c).all()


def test_build_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        build_index(np.zeros((2, 2)), [1, 1], np.zeros((1, 2)))


def test_full_probe_matches_brute_force(small_corpus, small_index):
    for row in (0, 17, 401):
        query = small_corpus.vectors[row] + 0.01
        exact = brute_force_search(small_corpus, query, 10)
        assert search(small_index, query, 10, small_index.n_clusters) == exact
        assert recall_at_k(search(small_index, query, 10, small_index.n_clusters), exact) == 1.0


def test_select_clusters_orders_by_centroid_distance(make_line_index):
    index = make_line_index([(0, 2), (5, 2), (1, 2), (9, 2)])
    assert select_clusters(index, [0.9, 0.0], 3) == [2, 0, 1]
    with pytest.raises(ValueError):
        select_clusters(index, [0.0, 0.0], 5)


def test_merge_breaks_distance_ties_by_id():
    a = TopKResult.from_entries([(5, 1.0), (9, 2.0)])
    b = TopKResult.from_entries([(3, 1.0), (9, 0.5)])
    merged = merge_topk(a, b, 3)
    assert merged.entries == [(9, 0.5), (3, 1.0), (5, 1.0)]


entries = st.lists(
    st.tuples(st.integers(min_value=0, max_value=30), st.integers(min_value=0, max_value=5).map(float)),
    max_size=20,
)


@given(entries, entries, st.integers(min_value=1, max_value=12))
def test_merge_is_topk_of_the_union(a, b, k):
    ra = TopKResult.from_candidates(np.array([i for i, _ in a], dtype=np.int64), np.array([d for _, d in a]), k)
    rb = TopKResult.from_candidates(np.array([i for i, _ in b], dtype=np.int64), np.array([d for _, d in b]), k)
    best = {}
    for doc, dist in a + b:
        best[doc] = min(dist, best.get(doc, np.inf))
    expected = sorted(best.items(), key=lambda e: (e[1], e[0]))[:k]
    # per-side truncation can only drop entries that would not survive the union
    assert merge_topk(ra, rb, k).entries == expected


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=16))
def test_resumed_search_matches_one_shot(small_index, chunks):
    query = small_index.centroids[3] + 0.02
    cursor = open_cursor(small_index, query, 10, 12)
    for budget in chunks:
        search_step(small_index, cursor, budget)
    search_step(small_index, cursor, cursor.nprobe)
    assert cursor.complete
    assert cursor.clusters_searched == 12
    assert cursor.heap == search(small_index, query, 10, 12)


def test_seeded_cursor_result_is_unchanged(small_index):
    query = small_index.centroids[5]
    plain = search(small_index, query, 10, 8)
    cursor = open_cursor(small_index, query, 10, 8, seed=plain)
    search_step(small_index, cursor, 8)
    assert cursor.heap == plain
    assert cursor.unchanged_streak == 8


def test_reorder_must_be_a_permutation_of_the_tail(small_index):
    cursor = open_cursor(small_index, small_index.centroids[0], 5, 6)
    search_step(small_index, cursor, 2)
    tail = cursor.remaining
    cursor.reorder_remaining(list(reversed(tail)))
    assert cursor.remaining == list(reversed(tail))
    with pytest.raises(ValueError):
        cursor.reorder_remaining(tail[:-1])


def test_out_of_order_clusters_are_rejected(small_index):
    cursor = open_cursor(small_index, small_index.centroids[0], 5, 4)
    with pytest.raises(RuntimeError):
        search_clusters(small_index, cursor, [cursor.plan[1]])


def test_cursor_validation():
    with pytest.raises(ValueError):
        SearchCursor(query=np.zeros(2), plan=[1, 1], k=3)
    with pytest.raises(ValueError):
        SearchCursor(query=np.zeros(2), plan=[1], k=0)


def test_cosine_ignores_query_scale():
    rng = np.random.default_rng(1)
    vectors = rng.standard_normal((40, 4)).astype(np.float32)
    index = build_index(vectors, np.arange(40), vectors[:4], Metric.COSINE)
    query = rng.standard_normal(4)
    assert np.array_equal(search(index, query, 5, 4).ids, search(index, query * 3.0, 5, 4).ids)


def test_save_and_load(tmp_path, small_index, small_corpus):
    small_index.save(tmp_path / "idx")
    loaded = IvfIndex.load(tmp_path / "idx")
    assert np.array_equal(loaded.centroids, small_index.centroids)
    assert np.array_equal(loaded.cluster_sizes(), small_index.cluster_sizes())
    query = small_corpus.vectors[11]
    assert search(loaded, query, 10, 6) == search(small_index, query, 10, 6)


def test_unknown_doc_id_is_rejected(small_index):
    with pytest.raises(ValueError):
        small_index.cluster_of([10**9])
