"""
Intra-request semantic similarity: locality cache, cluster reordering,
early termination and speculation validation
"""
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .vector_index import (ArrayLike, IvfIndex, SearchCursor, TopKResult, embedding_distance, search,
                           select_clusters, squared_distances)

DEFAULT_K_CACHE = 20

Hints = Tuple[FrozenSet[int], FrozenSet[int]]


@dataclass(frozen=True)
class LocalityRecord:
    """Extended top-k of a past query and the clusters behind it"""
    request_id: int
    query: np.ndarray
    extended_topk: TopKResult
    result_clusters: FrozenSet[int]
    searched_clusters: FrozenSet[int]

    @property
    def hints(self) -> Hints:
        return self.result_clusters, self.searched_clusters


@dataclass(frozen=True)
class Probe:
    """Seed heap for a new search and the reorder hints of the matching record"""
    seed: TopKResult
    hints: Hints
    distance: float


class LocalityCache:
    """Per-request locality records; entries live until the request finishes"""

    def __init__(self, k_cache: int = DEFAULT_K_CACHE):
        if k_cache < 1:
            raise ValueError(f"k_cache must be >= 1, got {k_cache}")
        self.k_cache = k_cache
        self._records: Dict[int, LocalityRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, request_id: int) -> bool:
        return request_id in self._records

    def get(self, request_id: int) -> Optional[LocalityRecord]:
        return self._records.get(request_id)

    def put(self, record: LocalityRecord) -> None:
        self._records[record.request_id] = record

    def evict(self, request_id: int) -> None:
        self._records.pop(request_id, None)


def record_search(cache: LocalityCache, request_id: int, query: ArrayLike, extended_topk: TopKResult,
                  result_clusters: Iterable[int], searched_clusters: Iterable[int]) -> LocalityCache:
    """Store the latest search of a request, replacing any earlier one"""
    held = frozenset(int(c) for c in result_clusters)
    searched = frozenset(int(c) for c in searched_clusters)
    if not held <= searched:
        raise ValueError("result clusters must be a subset of the searched clusters")
    cache.put(LocalityRecord(
        request_id=request_id,
        query=np.asarray(query, dtype=np.float64).ravel(),
        extended_topk=extended_topk.truncate(cache.k_cache),
        result_clusters=held,
        searched_clusters=searched,
    ))
    return cache


def probe_cache(cache: LocalityCache, request_id: int, v_prime: ArrayLike, k: int, delta: float,
                index: IvfIndex, plan: Optional[Sequence[int]] = None) -> Optional[Probe]:
    """Seed a new search of the same request from its cached neighbourhood.

    v_prime must be prepared for the index metric. Seeds are rescored exactly
    against v_prime; when a plan is given only documents of planned clusters
    are kept so the seeded search returns exactly what a cold search would.
    """
    if k > cache.k_cache:
        raise ValueError(f"k={k} exceeds the cached depth {cache.k_cache}")
    record = cache.get(request_id)
    if record is None:
        return None
    q = np.asarray(v_prime, dtype=np.float64).ravel()
    distance = embedding_distance(record.query, q)
    if distance > delta:
        return None

    ids = record.extended_topk.ids
    if plan is not None and len(ids):
        planned = np.isin(index.cluster_of(ids), np.asarray(list(plan), dtype=np.int64))
        ids = ids[planned]
    if len(ids):
        seed = TopKResult.from_candidates(ids, squared_distances(index.vectors_for(ids), q), k)
    else:
        seed = TopKResult.empty()
    return Probe(seed=seed, hints=record.hints, distance=distance)


def reorder_clusters(c_prime: Sequence[int], hints: Optional[Hints]) -> List[int]:
    """Held clusters first, then the rest of the searched ones, then everything else"""
    order = [int(c) for c in c_prime]
    if len(set(order)) != len(order):
        raise ValueError("cluster list contains duplicates")
    if not hints:
        return order
    held, searched = hints
    first = [c for c in order if c in held]
    second = [c for c in order if c in searched and c not in held]
    rest = [c for c in order if c not in searched and c not in held]
    return first + second + rest


def should_terminate(cursor: SearchCursor, streak: Optional[float]) -> bool:
    if streak is None or math.isinf(streak):
        return False
    return cursor.unchanged_streak >= streak


@dataclass(frozen=True)
class SpeculationOutcome:
    valid: bool
    compared_k: int
    overlap: float

    @property
    def kind(self) -> str:
        return "valid" if self.valid else "mismatch"


def validate_speculation(partial: TopKResult, final: TopKResult, k: int,
                         mode: Literal["strict", "recall"] = "strict",
                         threshold: float = 1.0) -> SpeculationOutcome:
    """Strict mode needs identical id sequences; recall mode accepts an overlap >= threshold"""
    a = partial.truncate(k).ids.tolist()
    b = final.truncate(k).ids.tolist()
    overlap = len(set(a) & set(b)) / len(b) if b else 1.0
    if mode == "strict":
        valid = a == b
    elif mode == "recall":
        valid = overlap >= threshold
    else:
        raise ValueError(f"unknown validation mode {mode!r}")
    return SpeculationOutcome(valid=valid, compared_k=min(k, len(b)), overlap=overlap)


def semantic_drift(prev_partial: ArrayLike, curr_partial: ArrayLike) -> float:
    return embedding_distance(prev_partial, curr_partial)


def result_clusters(index: IvfIndex, result: TopKResult) -> FrozenSet[int]:
    if not len(result):
        return frozenset()
    return frozenset(int(c) for c in index.cluster_of(result.ids))


def locality_observations(index: IvfIndex, v: ArrayLike, v_prime: ArrayLike, k: int,
                          k_cache: int = DEFAULT_K_CACHE, nprobe: int = 32) -> Dict[str, bool]:
    """Which locality properties a query pair satisfies.

    contained: top-k of v' lies inside the extended top-k of v
    held: top-k of v' lies in clusters holding the extended top-k of v
    searched: top-k of v' lies in clusters searched for v
    """
    nprobe = min(nprobe, index.n_clusters)
    extended = search(index, v, max(k, k_cache), nprobe)
    held = result_clusters(index, extended)
    searched = frozenset(select_clusters(index, v, nprobe))
    new = search(index, v_prime, k, nprobe)
    new_clusters = result_clusters(index, new)
    return {
        "contained": set(new.ids.tolist()) <= set(extended.ids.tolist()),
        "held": new_clusters <= held,
        "searched": new_clusters <= searched,
    }


def mean_rate(observations: Iterable[Dict[str, bool]]) -> Dict[str, float]:
    rows = list(observations)
    if not rows:
        return {"contained": 0.0, "held": 0.0, "searched": 0.0}
    return {key: sum(r[key] for r in rows) / len(rows) for key in ("contained", "held", "searched")}
