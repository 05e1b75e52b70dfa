"""
Calibration: scan cost and scheduling overhead measured on a real index,
throughput tables and the linear throughput models fitted to them
"""
import logging
import time
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd

from .retrieval_engine import BatchItem, RetrievalEngine, RetrievalTask, SubStageBatch
from .scheduler import WavefrontEntry, plan_substages, select_wavefront
from .tiered_cache import ThroughputProfile
from .types import Calibration, GenLatencyModel, LinearThroughputModel, RetrievalCostModel
from .vector_index import IvfIndex, SearchCursor, scan_cluster

logger = logging.getLogger(__name__)

DEFAULT_KV_GIB = (1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_RPS = (1, 2, 4, 8, 16, 32)


def measure_scan_cost(index: IvfIndex, n_queries: int = 16, seed: int = 0) -> float:
    """Wallclock ns per scanned vector over full scans of random centroids"""
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, index.n_clusters, size=n_queries)
    scanned = 0
    started = time.perf_counter_ns()
    for c in picks:
        query = index.prepare_query(index.centroids[c])
        for cluster_id in range(index.n_clusters):
            scan_cluster(index, query, cluster_id)
        scanned += index.size
    elapsed = time.perf_counter_ns() - started
    return elapsed / max(scanned, 1)


def measure_beta(index: IvfIndex, cost: RetrievalCostModel, n_entries: int = 32, repeats: int = 50) -> float:
    """Wallclock ms the scheduler spends planning one sub-stage"""
    rng = np.random.default_rng(0)
    entries = [
        WavefrontEntry(float(i), i, 0, "retrieval",
                       remaining=tuple(int(c) for c in rng.permutation(index.n_clusters)[:min(32, index.n_clusters)]))
        for i in range(n_entries)
    ]
    per_cluster = {c: cost.per_cluster_us / 1e3 + index.cluster_size(c) * cost.per_vector_ns / 1e6
                   for c in range(index.n_clusters)}
    started = time.perf_counter()
    for _ in range(repeats):
        plan_substages(select_wavefront(entries), 1.0, per_cluster.__getitem__)
    return (time.perf_counter() - started) * 1e3 / repeats


def generation_table(latency: GenLatencyModel, kv_per_seq_bytes: float,
                     kv_gib: Sequence[float] = DEFAULT_KV_GIB, rps: Sequence[int] = DEFAULT_RPS) -> pd.DataFrame:
    """Modeled decode throughput (tokens/s) for every (kv size, load) pair"""
    rows = []
    for gib in kv_gib:
        kv_bytes = gib * 2**30
        max_batch = max(1, int(kv_bytes // kv_per_seq_bytes))
        for level in rps:
            batch = min(level, max_batch)
            rows.append({"kv_bytes": kv_bytes, "rps": level, "throughput": batch / latency.expected_step_ms(batch) * 1e3})
    return pd.DataFrame(rows)


def retrieval_table(index: IvfIndex, cost: RetrievalCostModel, nprobe: int, k: int = 10,
                    rps: Sequence[int] = DEFAULT_RPS, seed: int = 0) -> pd.DataFrame:
    """Modeled retrieval throughput (queries/s) with `level` queries batched per call"""
    rng = np.random.default_rng(seed)
    nprobe = min(nprobe, index.n_clusters)
    rows = []
    for level in rps:
        engine = RetrievalEngine(index, cost)
        items = []
        for request_id in range(level):
            query = index.centroids[int(rng.integers(index.n_clusters))]
            order = np.argsort(((index.centroids - query) ** 2).sum(axis=1), kind="stable")[:nprobe]
            plan = [int(c) for c in order]
            engine.submit(RetrievalTask(request_id, 0, 0, SearchCursor(query=index.prepare_query(query), plan=plan, k=k)))
            items.append(BatchItem(request_id, 0, 0, plan))
        report = engine.step(SubStageBatch(items=items))
        rows.append({"rps": level, "throughput": level / max(report.latency_ms, 1e-9) * 1e3})
    return pd.DataFrame(rows)


def fit_linear(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """Least-squares fit of y = a*x0 + b*x1 with both coefficients clipped at 0"""
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    return max(float(coef[0]), 0.0), max(float(coef[1]), 0.0) if coef.shape[0] > 1 else 0.0


def calibrate(index: IvfIndex, latency: GenLatencyModel, cost: RetrievalCostModel, nprobe: int = 32,
              prompt_tokens: int = 128, kv_per_seq_bytes: float = 2**26,
              measure: bool = True) -> Tuple[Calibration, ThroughputProfile, Dict[str, float]]:
    """Measure cost constants, tabulate throughput and fit the speculation trigger models"""
    measured: Dict[str, float] = {}
    if measure:
        measured["per_vector_ns"] = measure_scan_cost(index)
        measured["beta_ms"] = measure_beta(index, cost)
        cost = cost.model_copy(update={"per_vector_ns": measured["per_vector_ns"]})
        logger.info("measured %.3f ns/vector, beta %.4f ms", measured["per_vector_ns"], measured["beta_ms"])

    # generation: processed tokens per ms as a function of active sequences and prefill tokens
    batches = np.arange(1, 65)
    gen_rows = []
    for n in batches:
        for prefill in (0, prompt_tokens):
            step = latency.expected_step_ms(int(n)) + prefill * latency.per_seq_ms
            gen_rows.append((n, prefill, (n + prefill) / step))
    gen = np.asarray(gen_rows, dtype=np.float64)
    a_gen, b_gen = fit_linear(gen[:, :2], gen[:, 2])
    gen_model = LinearThroughputModel(a=a_gen, b=b_gen, t_max=float(gen[:, 2].max()))

    ret = retrieval_table(index, cost, nprobe)
    x = ret["rps"].to_numpy(dtype=np.float64)[:, None]
    per_ms = ret["throughput"].to_numpy(dtype=np.float64) / 1e3
    a_ret, _ = fit_linear(x, per_ms)
    ret_model = LinearThroughputModel(a=max(a_ret, 1e-9), b=0.0, t_max=float(per_ms.max()))

    calibration = Calibration(
        gen=gen_model,
        ret=ret_model,
        per_vector_ns=measured.get("per_vector_ns"),
        beta_ms=measured.get("beta_ms"),
    )
    cluster_bytes = float(index.cluster_sizes().mean() * index.dim * 4)
    profile = ThroughputProfile(
        gen=generation_table(latency, kv_per_seq_bytes),
        ret=ret,
        cluster_bytes=cluster_bytes,
    )
    return calibration, profile, measured
