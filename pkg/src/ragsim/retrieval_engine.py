"""
Step-wise retrieval worker: variable-length batched cluster searches across
requests split over a slow lane and a cache-backed fast lane
"""
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from .similarity import should_terminate
from .tiered_cache import TieredCache
from .types import RetrievalCostModel
from .vector_index import IvfIndex, SearchCursor, TopKResult, search_clusters

logger = logging.getLogger(__name__)

Lane = Literal["slow", "fast"]
TaskKey = Tuple[int, int]


class Origin(str, Enum):
    NORMAL = "normal"
    SPECULATIVE = "speculative"


@dataclass
class RetrievalTask:
    request_id: int
    node_id: int
    subnode_id: int
    cursor: SearchCursor
    origin: Origin = Origin.NORMAL

    @property
    def key(self) -> TaskKey:
        return self.request_id, self.node_id


@dataclass
class BatchItem:
    request_id: int
    node_id: int
    subnode_id: int
    clusters: List[int]
    fast: List[int] = field(default_factory=list)
    slow: List[int] = field(default_factory=list)

    @property
    def key(self) -> TaskKey:
        return self.request_id, self.node_id


@dataclass
class SubStageBatch:
    items: List[BatchItem]
    planned_cost_ms: float = 0.0

    @property
    def clusters(self) -> List[int]:
        return [c for item in self.items for c in item.clusters]


@dataclass
class ItemReport:
    request_id: int
    node_id: int
    subnode_id: int
    origin: Origin
    clusters: List[int]
    heap: TopKResult
    heap_changed: bool
    complete: bool
    terminated: bool = False


@dataclass
class RetrievalStepReport:
    items: List[ItemReport]
    latency_ms: float
    slow_ms: float
    fast_ms: float
    slow_clusters: int
    fast_clusters: int
    wallclock_ms: Optional[float] = None


def cluster_cost_ms(index: IvfIndex, cost: RetrievalCostModel, cluster_id: int, lane: Lane = "slow") -> float:
    """Modeled scan time of one cluster in ms"""
    variable_ns = index.cluster_size(cluster_id) * cost.per_vector_ns
    if lane == "fast":
        variable_ns /= cost.fast_speedup
    return cost.per_cluster_us / 1e3 + variable_ns / 1e6


class RetrievalEngine:
    """Owns the live search cursors; one cursor per (request, node)"""

    def __init__(self, index: IvfIndex, cost: RetrievalCostModel, cache: Optional[TieredCache] = None,
                 live: bool = False, workers: Optional[int] = None, termination_streak: Optional[int] = None):
        self.index = index
        self.cost = cost
        self.cache = cache
        self.live = live
        self.termination_streak = termination_streak
        self._tasks: Dict[TaskKey, RetrievalTask] = {}
        self._pool = ThreadPoolExecutor(max_workers=workers or os.cpu_count() or 1) if live else None

    @property
    def tasks(self) -> List[RetrievalTask]:
        return [self._tasks[k] for k in sorted(self._tasks)]

    def task(self, request_id: int, node_id: int) -> Optional[RetrievalTask]:
        return self._tasks.get((request_id, node_id))

    def submit(self, task: RetrievalTask) -> None:
        if task.key in self._tasks:
            raise ValueError(f"request {task.request_id} already has a live search for node {task.node_id}")
        self._tasks[task.key] = task

    def cancel(self, request_id: int, node_id: int) -> bool:
        return self._tasks.pop((request_id, node_id), None) is not None

    def estimate_cluster_cost(self, cluster_id: int, lane: Lane = "slow") -> float:
        return cluster_cost_ms(self.index, self.cost, cluster_id, lane)

    def _partition(self, items: List[BatchItem], now: float) -> None:
        if self.cache is None:
            for item in items:
                item.fast, item.slow = [], list(item.clusters)
            return
        self.cache.maybe_update(now)
        clusters = [c for item in items for c in item.clusters]
        fast, _ = self.cache.partition_batch(clusters)
        fast_set = set(fast)
        for item in items:
            item.fast = [c for c in item.clusters if c in fast_set]
            item.slow = [c for c in item.clusters if c not in fast_set]
        self.cache.record_access(clusters)

    def _run_item(self, task: RetrievalTask, item: BatchItem) -> ItemReport:
        report = search_clusters(self.index, task.cursor, item.clusters)
        terminated = False
        if not task.cursor.complete and should_terminate(task.cursor, self.termination_streak):
            task.cursor.next_pos = len(task.cursor.plan)
            terminated = True
        return ItemReport(
            request_id=task.request_id,
            node_id=task.node_id,
            subnode_id=item.subnode_id,
            origin=task.origin,
            clusters=item.clusters,
            heap=task.cursor.heap,
            heap_changed=report.heap_changed,
            complete=task.cursor.complete,
            terminated=terminated,
        )

    def step(self, batch: SubStageBatch, now: float = 0.0) -> RetrievalStepReport:
        """Execute one sub-stage; items whose task was cancelled are skipped"""
        runnable = [(self._tasks[item.key], item) for item in batch.items if item.key in self._tasks]
        self._partition([item for _, item in runnable], now)

        started = time.perf_counter()
        if self._pool is not None and len(runnable) > 1:
            items = list(self._pool.map(lambda pair: self._run_item(*pair), runnable))
        else:
            items = [self._run_item(task, item) for task, item in runnable]
        wallclock = (time.perf_counter() - started) * 1e3

        for report in items:
            if report.complete:
                del self._tasks[(report.request_id, report.node_id)]
        items.sort(key=lambda r: (r.request_id, r.subnode_id))

        slow_ms = sum(self.estimate_cluster_cost(c, "slow") for _, item in runnable for c in item.slow)
        fast_ms = sum(self.estimate_cluster_cost(c, "fast") for _, item in runnable for c in item.fast)
        fixed_ms = self.cost.fixed_call_us / 1e3 if runnable else 0.0
        latency = wallclock if self.live else max(slow_ms, fast_ms) + fixed_ms
        return RetrievalStepReport(
            items=items,
            latency_ms=latency,
            slow_ms=slow_ms,
            fast_ms=fast_ms,
            slow_clusters=sum(len(item.slow) for _, item in runnable),
            fast_clusters=sum(len(item.fast) for _, item in runnable),
            wallclock_ms=wallclock if self.live else None,
        )

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
