"""
Exact-math IVF index: k-means training, nprobe cluster selection and
resumable per-cluster search.

Ranking distances are squared L2 computed in float64 against float32
storage. Cosine is served by the same kernel over unit-normalized vectors.
Every ordering breaks ties by ascending distance, then ascending id.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import Corpus, read_hvec, write_hvec
from .types import Metric

# Elements of float64 scratch space per pairwise-distance chunk
_CHUNK_ELEMS = 1 << 22

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]]]


class TopKResult:
    """Ranked (doc_id, distance) entries, ascending by distance then doc_id"""

    __slots__ = ("ids", "distances")

    def __init__(self, ids: np.ndarray, distances: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        distances = np.asarray(distances, dtype=np.float64)
        if ids.shape != distances.shape or ids.ndim != 1:
            raise ValueError("ids and distances must be 1-D arrays of equal length")
        self.ids = ids
        self.distances = distances

    @classmethod
    def empty(cls) -> "TopKResult":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @classmethod
    def from_candidates(cls, ids: np.ndarray, distances: np.ndarray, k: int) -> "TopKResult":
        return _select_topk(np.asarray(ids, dtype=np.int64), np.asarray(distances, dtype=np.float64), k)

    @classmethod
    def from_entries(cls, entries: Iterable[Tuple[int, float]]) -> "TopKResult":
        entries = list(entries)
        if not entries:
            return cls.empty()
        ids, dists = zip(*entries)
        return cls(np.array(ids, dtype=np.int64), np.array(dists, dtype=np.float64))

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]

    def truncate(self, k: int) -> "TopKResult":
        return TopKResult(self.ids[:k], self.distances[:k])

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopKResult):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.distances, other.distances)

    def __repr__(self) -> str:
        return f"TopKResult({self.entries})"

    def to_dict(self) -> dict:
        return {"ids": self.ids.tolist(), "distances": self.distances.tolist()}


def _select_topk(ids: np.ndarray, distances: np.ndarray, k: int) -> TopKResult:
    if ids.size == 0 or k <= 0:
        return TopKResult.empty()
    order = np.lexsort((ids, distances))
    ids, distances = ids[order], distances[order]
    # first occurrence of a doc after the sort carries its minimum distance
    _, first = np.unique(ids, return_index=True)
    keep = np.sort(first)[:k]
    return TopKResult(ids[keep], distances[keep])


def merge_topk(a: TopKResult, b: TopKResult, k: int) -> TopKResult:
    """Top-k of the union of two results, duplicate doc ids collapsed to their minimum distance"""
    return _select_topk(np.concatenate([a.ids, b.ids]), np.concatenate([a.distances, b.distances]), k)


def _as_matrix(vectors: ArrayLike) -> np.ndarray:
    matrix = np.asarray(vectors, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"expected an (N, D) matrix, got shape {matrix.shape}")
    if matrix.shape[1] < 1:
        raise ValueError("embedding dimension must be at least 1")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("embeddings must be finite")
    return matrix


def _normalize(matrix: np.ndarray) -> np.ndarray:
    wide = matrix.astype(np.float64)
    norms = np.linalg.norm(wide, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return wide / norms


def prepare_vectors(vectors: ArrayLike, metric: Metric = Metric.L2) -> np.ndarray:
    """float32 storage form of a corpus under the metric"""
    matrix = _as_matrix(vectors)
    if Metric(metric) == Metric.COSINE:
        matrix = _normalize(matrix).astype(np.float32)
    return np.ascontiguousarray(matrix)


def prepare_query(query: ArrayLike, dim: int, metric: Metric = Metric.L2) -> np.ndarray:
    """float64 search form of a query: storage rounding first, normalization for cosine"""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"query dimension {q.shape[0]} does not match index dimension {dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query must be finite")
    if Metric(metric) == Metric.COSINE:
        return _normalize(q.reshape(1, -1)).astype(np.float32).astype(np.float64).reshape(-1)
    return q.astype(np.float64)


def squared_distances(vectors: np.ndarray, query64: np.ndarray) -> np.ndarray:
    """Row-wise squared L2; a row's value does not depend on its neighbours"""
    if vectors.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    diff = np.ascontiguousarray(vectors, dtype=np.float32).astype(np.float64) - query64
    return np.square(diff).sum(axis=1)


def embedding_distance(a: ArrayLike, b: ArrayLike) -> float:
    """Euclidean distance between two embeddings"""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.sqrt(np.square(a - b).sum()))


def _pairwise_sq(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    points = points.astype(np.float64, copy=False)
    centers = centers.astype(np.float64, copy=False)
    n, k = points.shape[0], centers.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, k * points.shape[1]))
    for start in range(0, n, step):
        diff = points[start:start + step, None, :] - centers[None, :, :]
        out[start:start + step] = np.square(diff).sum(axis=2)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest = _pairwise_sq(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[j] = points[idx]
        closest = np.minimum(closest, _pairwise_sq(points, centroids[j:j + 1])[:, 0])
    return centroids


def train_kmeans(corpus: ArrayLike, k_clusters: int, max_iters: int = 20, seed: int = 0) -> np.ndarray:
    """Lloyd iterations from a k-means++ seeding.

    Stops after max_iters or once no assignment changes. A cluster left empty
    is re-seeded to the point farthest from its current centroid (lowest
    index on ties), one point per empty cluster in cluster-id order.
    """
    points = _as_matrix(corpus).astype(np.float64)
    n = points.shape[0]
    if k_clusters < 1:
        raise ValueError(f"k_clusters must be >= 1, got {k_clusters}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if n < k_clusters:
        raise ValueError(f"corpus of {n} points is smaller than k_clusters={k_clusters}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k_clusters, rng)
    assignment: Optional[np.ndarray] = None

    for _ in range(max_iters):
        dists = _pairwise_sq(points, centroids)
        new_assignment = np.argmin(dists, axis=1)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

        counts = np.bincount(assignment, minlength=k_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        if not nonempty.all():
            spread = dists[np.arange(n), assignment].copy()
            for c in np.flatnonzero(~nonempty):
                idx = int(np.argmax(spread))
                centroids[c] = points[idx]
                spread[idx] = -1.0
    return centroids


class IvfIndex:
    """Trained centroids plus per-cluster inverted lists. Immutable after build."""

    def __init__(self, centroids: np.ndarray, list_ids: List[np.ndarray], list_vectors: List[np.ndarray], metric: Metric = Metric.L2):
        if len(list_ids) != centroids.shape[0] or len(list_vectors) != centroids.shape[0]:
            raise ValueError("one inverted list per centroid is required")
        self.centroids = _frozen(np.asarray(centroids, dtype=np.float64))
        self.list_ids = [_frozen(np.asarray(ids, dtype=np.int64)) for ids in list_ids]
        self.list_vectors = [_frozen(np.ascontiguousarray(v, dtype=np.float32)) for v in list_vectors]
        self.metric = Metric(metric)

        all_ids = np.concatenate(self.list_ids) if self.list_ids else np.empty(0, dtype=np.int64)
        clusters = np.concatenate([np.full(len(ids), c, dtype=np.int64) for c, ids in enumerate(self.list_ids)])
        positions = np.concatenate([np.arange(len(ids), dtype=np.int64) for ids in self.list_ids])
        order = np.argsort(all_ids, kind="stable")
        self._sorted_ids = all_ids[order]
        self._doc_cluster = clusters[order]
        self._doc_position = positions[order]
        self._mean_nearest: Optional[float] = None

    @property
    def n_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def size(self) -> int:
        return int(self._sorted_ids.shape[0])

    def cluster_size(self, cluster_id: int) -> int:
        return int(self.list_ids[cluster_id].shape[0])

    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(ids) for ids in self.list_ids], dtype=np.int64)

    def _locate(self, doc_ids: ArrayLike) -> np.ndarray:
        doc_ids = np.asarray(doc_ids, dtype=np.int64).reshape(-1)
        if doc_ids.size == 0:
            return np.empty(0, dtype=np.int64)
        if self.size == 0:
            raise ValueError("unknown doc id")
        slots = np.searchsorted(self._sorted_ids, doc_ids)
        if np.any(slots >= self.size) or np.any(self._sorted_ids[np.minimum(slots, self.size - 1)] != doc_ids):
            raise ValueError("unknown doc id")
        return slots

    def cluster_of(self, doc_ids: ArrayLike) -> np.ndarray:
        return self._doc_cluster[self._locate(doc_ids)]

    def vectors_for(self, doc_ids: ArrayLike) -> np.ndarray:
        slots = self._locate(doc_ids)
        if slots.size == 0:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.stack([
            self.list_vectors[c][p] for c, p in zip(self._doc_cluster[slots], self._doc_position[slots])
        ])

    def mean_nearest_centroid_distance(self) -> float:
        """Mean Euclidean distance of the stored vectors to their own centroid"""
        if self._mean_nearest is None:
            total = 0.0
            for c in range(self.n_clusters):
                if self.cluster_size(c):
                    total += float(np.sqrt(squared_distances(self.list_vectors[c], self.centroids[c])).sum())
            self._mean_nearest = total / max(1, self.size)
        return self._mean_nearest

    def prepare_query(self, query: ArrayLike) -> np.ndarray:
        return prepare_query(query, self.dim, self.metric)

    def save(self, directory: Union[str, Path]) -> None:
        """Persist as corpus.hvec + centroids.hvec + assignments.u32"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        vectors = np.concatenate(self.list_vectors) if self.size else np.empty((0, self.dim), dtype=np.float32)
        ids = np.concatenate(self.list_ids)
        assignment = np.concatenate([np.full(len(v), c, dtype="<u4") for c, v in enumerate(self.list_ids)])
        write_hvec(directory / "corpus.hvec", vectors, ids, self.metric)
        write_hvec(directory / "centroids.hvec", self.centroids, None, self.metric)
        (directory / "assignments.u32").write_bytes(assignment.astype("<u4").tobytes())

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "IvfIndex":
        directory = Path(directory)
        vectors, ids, metric = read_hvec(directory / "corpus.hvec", with_ids=True)
        centroids, _, _ = read_hvec(directory / "centroids.hvec", with_ids=False)
        assignment = np.frombuffer((directory / "assignments.u32").read_bytes(), dtype="<u4").astype(np.int64)
        if assignment.shape[0] != vectors.shape[0]:
            raise ValueError(f"{directory}: {assignment.shape[0]} assignments for {vectors.shape[0]} vectors")
        if assignment.size and assignment.max() >= centroids.shape[0]:
            raise ValueError(f"{directory}: assignment refers to a missing cluster")
        list_ids, list_vectors = _group(assignment, ids, vectors, centroids.shape[0])
        return cls(centroids.astype(np.float64), list_ids, list_vectors, metric)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _group(assignment: np.ndarray, ids: np.ndarray, vectors: np.ndarray, k: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    order = np.argsort(assignment, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(assignment, minlength=k))])
    list_ids = [ids[order[bounds[c]:bounds[c + 1]]] for c in range(k)]
    list_vectors = [vectors[order[bounds[c]:bounds[c + 1]]] for c in range(k)]
    return list_ids, list_vectors


def build_index(corpus: ArrayLike, doc_ids: ArrayLike, centroids: ArrayLike, metric: Metric = Metric.L2) -> IvfIndex:
    """Place every embedding in its nearest centroid's list (lowest cluster id on ties)"""
    vectors = prepare_vectors(corpus, metric)
    ids = np.asarray(doc_ids, dtype=np.int64).reshape(-1)
    # centroids are kept float32-representable so that a saved index reloads bit-exactly
    centers = np.asarray(centroids, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 1:
        raise ValueError("centroids must be a non-empty (k, D) matrix")
    centers = centers.astype(np.float32).astype(np.float64)
    if vectors.shape[0] != ids.shape[0]:
        raise ValueError(f"{vectors.shape[0]} embeddings but {ids.shape[0]} doc ids")
    if np.unique(ids).shape[0] != ids.shape[0]:
        raise ValueError("doc ids must be unique")
    if vectors.shape[1] != centers.shape[1]:
        raise ValueError(f"embedding dimension {vectors.shape[1]} does not match centroid dimension {centers.shape[1]}")

    assignment = np.argmin(_pairwise_sq(vectors, centers), axis=1)
    list_ids, list_vectors = _group(assignment, ids, vectors, centers.shape[0])
    return IvfIndex(centers, list_ids, list_vectors, metric)


def build_from_corpus(corpus: Corpus, k_clusters: int, max_iters: int = 20, seed: int = 0) -> IvfIndex:
    """Train on the metric's storage form, then build"""
    vectors = prepare_vectors(corpus.vectors, corpus.metric)
    centroids = train_kmeans(vectors, k_clusters, max_iters=max_iters, seed=seed)
    return build_index(corpus.vectors, corpus.doc_ids, centroids, corpus.metric)


def select_clusters(index: IvfIndex, query: ArrayLike, nprobe: int) -> List[int]:
    """The nprobe clusters closest to the query, nearest first"""
    if not 1 <= nprobe <= index.n_clusters:
        raise ValueError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
    q = index.prepare_query(query)
    dists = squared_distances(index.centroids, q)
    order = np.lexsort((np.arange(index.n_clusters), dists))
    return [int(c) for c in order[:nprobe]]


def scan_cluster(index: IvfIndex, query64: np.ndarray, cluster_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exact distances of a prepared query to every vector of one cluster"""
    return index.list_ids[cluster_id], squared_distances(index.list_vectors[cluster_id], query64)


@dataclass
class SearchCursor:
    """Resumable per-request search state over an ordered cluster plan"""
    query: np.ndarray
    plan: List[int]
    k: int
    next_pos: int = 0
    heap: TopKResult = field(default_factory=TopKResult.empty)
    clusters_searched: int = 0
    unchanged_streak: int = 0

    def __post_init__(self):
        self.plan = [int(c) for c in self.plan]
        if len(set(self.plan)) != len(self.plan):
            raise ValueError("cluster plan contains duplicates")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.next_pos <= len(self.plan):
            raise ValueError("next_pos outside the plan")

    @property
    def nprobe(self) -> int:
        return len(self.plan)

    @property
    def remaining(self) -> List[int]:
        return self.plan[self.next_pos:]

    @property
    def complete(self) -> bool:
        return self.next_pos >= len(self.plan)

    @property
    def searched(self) -> List[int]:
        return self.plan[:self.next_pos]

    def reorder_remaining(self, order: Sequence[int]) -> None:
        """Replace the unsearched tail of the plan with a permutation of itself"""
        order = [int(c) for c in order]
        if sorted(order) != sorted(self.remaining):
            raise ValueError("new order must be a permutation of the remaining clusters")
        self.plan = self.searched + order

    def copy(self) -> "SearchCursor":
        return SearchCursor(
            query=self.query,
            plan=list(self.plan),
            k=self.k,
            next_pos=self.next_pos,
            heap=self.heap,
            clusters_searched=self.clusters_searched,
            unchanged_streak=self.unchanged_streak,
        )


@dataclass
class StepReport:
    clusters: List[int]
    heap_changed: bool


def open_cursor(index: IvfIndex, query: ArrayLike, k: int, nprobe: int, seed: Optional[TopKResult] = None) -> SearchCursor:
    cursor = SearchCursor(query=index.prepare_query(query), plan=select_clusters(index, query, nprobe), k=k)
    if seed is not None:
        cursor.heap = seed.truncate(k)
    return cursor


def search_clusters(index: IvfIndex, cursor: SearchCursor, clusters: Sequence[int]) -> StepReport:
    """Scan the given clusters, which must be the next ones of the cursor's plan"""
    clusters = [int(c) for c in clusters]
    expected = cursor.plan[cursor.next_pos:cursor.next_pos + len(clusters)]
    if clusters != expected:
        raise RuntimeError(f"clusters {clusters} are not the next entries {expected} of the cursor plan")

    changed_any = False
    for cluster_id in clusters:
        ids, dists = scan_cluster(index, cursor.query, cluster_id)
        merged = merge_topk(cursor.heap, TopKResult.from_candidates(ids, dists, cursor.k), cursor.k)
        changed = merged != cursor.heap
        cursor.heap = merged
        cursor.next_pos += 1
        cursor.clusters_searched += 1
        cursor.unchanged_streak = 0 if changed else cursor.unchanged_streak + 1
        changed_any = changed_any or changed
    return StepReport(clusters=clusters, heap_changed=changed_any)


def search_step(index: IvfIndex, cursor: SearchCursor, cluster_budget: int) -> StepReport:
    """Scan up to cluster_budget clusters; an exhausted cursor yields an empty report"""
    if cursor.complete:
        return StepReport(clusters=[], heap_changed=False)
    if cluster_budget < 1:
        raise ValueError(f"cluster_budget must be >= 1, got {cluster_budget}")
    return search_clusters(index, cursor, cursor.plan[cursor.next_pos:cursor.next_pos + cluster_budget])


def search(index: IvfIndex, query: ArrayLike, k: int, nprobe: int) -> TopKResult:
    cursor = open_cursor(index, query, k, nprobe)
    search_step(index, cursor, cursor.nprobe)
    return cursor.heap


def brute_force_search(corpus: Union[Corpus, ArrayLike], query: ArrayLike, k: int,
                       metric: Metric = Metric.L2, doc_ids: Optional[ArrayLike] = None) -> TopKResult:
    """Exact top-k over the whole corpus"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(corpus, Corpus):
        doc_ids = corpus.doc_ids if doc_ids is None else doc_ids
        metric = corpus.metric
        corpus = corpus.vectors
    matrix = np.asarray(corpus, dtype=np.float32)
    if matrix.size == 0:
        return TopKResult.empty()
    vectors = prepare_vectors(matrix, metric)
    ids = np.arange(vectors.shape[0], dtype=np.int64) if doc_ids is None else np.asarray(doc_ids, dtype=np.int64)
    q = prepare_query(query, vectors.shape[1], metric)
    return TopKResult.from_candidates(ids, squared_distances(vectors, q), k)


def recall_at_k(result: TopKResult, truth: TopKResult) -> float:
    if len(truth) == 0:
        return 1.0
    return len(set(result.ids.tolist()) & set(truth.ids.tolist())) / len(truth)
