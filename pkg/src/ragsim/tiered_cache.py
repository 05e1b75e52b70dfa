"""
Fast-tier partial index cache: access frequency tracking, interval-based
asynchronous swaps, lane partitioning and the memory budget solver
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .types import CacheConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SwapOp:
    cluster_id: int
    direction: Literal["in", "out"]
    completes_at: float


class TieredCache:
    """Residency state of the fast tier"""

    def __init__(self, cluster_bytes: Union[Sequence[float], np.ndarray], config: CacheConfig = CacheConfig()):
        self.config = config
        self.cluster_bytes = np.asarray(cluster_bytes, dtype=np.float64)
        self.n_clusters = len(self.cluster_bytes)
        self.capacity_gc = config.resolve_capacity(self.n_clusters)
        self.update_interval = config.update_interval
        self.resident: set = set()
        self.in_flight: Dict[int, SwapOp] = {}
        self.freq = np.zeros(self.n_clusters, dtype=np.float64)
        self.substages_since_update = 0
        self.hits = 0
        self.misses = 0
        self.swaps_in = 0
        self.swaps_out = 0
        self._transfer_free_at = 0.0

    @classmethod
    def for_index(cls, index, config: CacheConfig = CacheConfig()) -> "TieredCache":
        sizes = index.cluster_sizes().astype(np.float64)
        return cls(sizes * index.dim * 4, config)

    def record_access(self, cluster_ids: Iterable[int]) -> None:
        """Count each accessed cluster once for this sub-stage"""
        ids = np.unique(np.asarray(list(cluster_ids), dtype=np.int64))
        if ids.size == 0:
            return
        self.freq[ids] += 1
        self.substages_since_update += 1

    def transfer_ms(self, cluster_id: int) -> float:
        return self.cluster_bytes[cluster_id] / (self.config.transfer_gbps * 1e9) * 1e3

    def publish(self, now: float) -> List[int]:
        """Make swap-ins that finished by now resident"""
        done = sorted(c for c, op in self.in_flight.items() if op.completes_at <= now)
        for cluster_id in done:
            del self.in_flight[cluster_id]
            self.resident.add(cluster_id)
        return done

    def target_set(self) -> List[int]:
        """Top-gc clusters by frequency, ties to the lower id; never-accessed clusters excluded"""
        order = np.lexsort((np.arange(self.n_clusters), -self.freq))
        return [int(c) for c in order[:self.capacity_gc] if self.freq[c] > 0]

    def maybe_update(self, now: float) -> List[SwapOp]:
        self.publish(now)
        if self.substages_since_update < self.update_interval:
            return []

        target = set(self.target_set())
        ops: List[SwapOp] = []
        for cluster_id in sorted(self.resident - target):
            self.resident.discard(cluster_id)
            ops.append(SwapOp(cluster_id, "out", now))
        for cluster_id in sorted(set(self.in_flight) - target):
            del self.in_flight[cluster_id]
            ops.append(SwapOp(cluster_id, "out", now))
        for cluster_id in sorted(target - self.resident - set(self.in_flight)):
            start = max(now, self._transfer_free_at)
            op = SwapOp(cluster_id, "in", start + self.transfer_ms(cluster_id))
            self._transfer_free_at = op.completes_at
            self.in_flight[cluster_id] = op
            ops.append(op)

        self.swaps_in += sum(op.direction == "in" for op in ops)
        self.swaps_out += sum(op.direction == "out" for op in ops)
        self.freq *= self.config.decay
        self.substages_since_update = 0
        if ops:
            logger.debug("cache update at %.3f ms: %d in, %d out", now,
                         sum(op.direction == "in" for op in ops), sum(op.direction == "out" for op in ops))
        return ops

    def partition_batch(self, clusters: Sequence[int]) -> Tuple[List[int], List[int]]:
        """Split a sub-stage's clusters into (fast, slow) lanes; hits count clusters served by the fast lane"""
        clusters = [int(c) for c in clusters]
        fast = [c for c in clusters if c in self.resident]
        if len(fast) < self.config.min_fast_clusters:
            self.misses += len(clusters)
            return [], clusters
        self.hits += len(fast)
        self.misses += len(clusters) - len(fast)
        resident = set(fast)
        return fast, [c for c in clusters if c not in resident]

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def reset_counters(self) -> None:
        self.hits = 0
        self.misses = 0


@dataclass
class ThroughputProfile:
    """Measured generation throughput T_G(kv_bytes, rps) and retrieval throughput T_R(rps)"""
    gen: pd.DataFrame
    ret: pd.DataFrame
    cluster_bytes: float

    def __post_init__(self):
        if self.gen.empty or self.ret.empty:
            raise ValueError("throughput tables must not be empty")
        self.gen = self.gen.sort_values(["rps", "kv_bytes"]).reset_index(drop=True)
        self.ret = self.ret.sort_values("rps").reset_index(drop=True)
        for _, group in self.gen.groupby("rps"):
            if (group["throughput"].diff().dropna() < 0).any():
                raise ValueError("generation throughput must be non-decreasing in kv_bytes")

    @classmethod
    def from_csv(cls, path: Union[str, Path], cluster_bytes: float) -> "ThroughputProfile":
        table = pd.read_csv(path)
        missing = {"kind", "kv_bytes", "rps", "throughput"} - set(table.columns)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        gen = table[table["kind"] == "gen"][["kv_bytes", "rps", "throughput"]]
        ret = table[table["kind"] == "ret"][["rps", "throughput"]]
        return cls(gen=gen, ret=ret, cluster_bytes=cluster_bytes)

    def to_csv(self, path: Union[str, Path]) -> None:
        gen = self.gen.assign(kind="gen")
        ret = self.ret.assign(kind="ret", kv_bytes=0)
        table = pd.concat([gen, ret], ignore_index=True)[["kind", "kv_bytes", "rps", "throughput"]]
        table.to_csv(path, index=False)

    def kv_sizes(self) -> List[float]:
        return sorted(self.gen["kv_bytes"].unique().tolist())

    def _nearest_rps(self, table: pd.DataFrame, rps: float) -> float:
        levels = np.sort(table["rps"].unique())
        return float(levels[np.argmin(np.abs(levels - rps))])

    def t_gen(self, kv_bytes: float, rps: float) -> float:
        level = self._nearest_rps(self.gen, rps)
        rows = self.gen[(self.gen["rps"] == level) & (self.gen["kv_bytes"] == kv_bytes)]
        if rows.empty:
            raise ValueError(f"no generation measurement for kv_bytes={kv_bytes} at rps={level}")
        return float(rows["throughput"].iloc[0])

    def t_ret(self, rps: float) -> float:
        level = self._nearest_rps(self.ret, rps)
        return float(self.ret[self.ret["rps"] == level]["throughput"].iloc[0])

    def capacity_for(self, cache_bytes: float) -> int:
        return int(cache_bytes // self.cluster_bytes) if self.cluster_bytes > 0 else 0


@dataclass(frozen=True)
class MemoryBudget:
    kv_bytes: float
    cache_bytes: float
    capacity_gc: int
    throughput: float


def solve_memory_budget(profile: ThroughputProfile, rps_gen: float, rps_ret: float,
                        total_mem: float, model_bytes: float) -> MemoryBudget:
    """Pick the smallest KV size maximising min(T_G, T_R); the rest goes to the index cache"""
    if total_mem <= model_bytes:
        raise ValueError(f"total memory {total_mem} does not exceed model size {model_bytes}")
    free = total_mem - model_bytes
    feasible = [kv for kv in profile.kv_sizes() if kv <= free]
    if not feasible:
        raise ValueError(f"no profiled KV size fits into {free} bytes")

    t_ret = profile.t_ret(rps_ret)
    best_kv, best = feasible[0], -np.inf
    for kv in feasible:
        value = min(profile.t_gen(kv, rps_gen), t_ret)
        if value > best:
            best_kv, best = kv, value
    cache_bytes = free - best_kv
    return MemoryBudget(
        kv_bytes=best_kv,
        cache_bytes=cache_bytes,
        capacity_gc=profile.capacity_for(cache_bytes),
        throughput=float(best),
    )
