"""
Request traces: synthetic workload generation over a Gaussian-mixture corpus
and the skew / locality / termination measurements taken on them
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .corpus import topic_centers
from .generation_engine import Checkpoint, GenerationScript
from .raggraph import END, GenerationNode, RAGraph, RequestState, Value, advance, load_workflow
from .similarity import (LocalityCache, locality_observations, mean_rate, probe_cache, record_search,
                         reorder_clusters, result_clusters, should_terminate)
from .types import ArrivalSpec, TokenDist, WorkloadSpec
from .vector_index import IvfIndex, open_cursor, search, search_step, select_clusters

logger = logging.getLogger(__name__)


class RequestRecord(BaseModel):
    request_id: int = Field(..., ge=0)
    arrival_ms: float = Field(..., ge=0, description="Arrival offset from the start of the run")
    workflow: str = Field(..., description="Template name or workflow file")
    topic: int = Field(default=-1, description="Corpus topic the request was drawn from")
    query: List[float] = Field(..., description="Initial query embedding")
    scripts: List[GenerationScript] = Field(default_factory=list, description="Generation stages in execution order")

    def query_chain(self) -> List[np.ndarray]:
        """Initial query followed by the final embedding of every generation stage"""
        return [np.asarray(self.query, dtype=np.float32)] + [s.final_vector() for s in self.scripts]


class RequestTrace(BaseModel):
    dim: int = Field(..., ge=1)
    requests: List[RequestRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_dims(self) -> "RequestTrace":
        for record in self.requests:
            if len(record.query) != self.dim:
                raise ValueError(f"request {record.request_id}: query has dimension {len(record.query)}, trace has {self.dim}")
            for script in record.scripts:
                if len(script.final_embedding) != self.dim:
                    raise ValueError(f"request {record.request_id}: script embedding dimension mismatch")
        ids = [r.request_id for r in self.requests]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate request ids in trace")
        return self

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RequestTrace":
        return cls.model_validate_json(Path(path).read_text())


def zipf_probabilities(n: int, s: float) -> np.ndarray:
    """P(rank i) proportional to 1 / i**s for i = 1..n"""
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return weights / weights.sum()


def arrival_times(spec: ArrivalSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "fixed":
        return np.sort(np.asarray(spec.offsets_ms, dtype=np.float64))
    mean_gap = 1e3 / spec.rate_per_s
    times = []
    now = rng.exponential(mean_gap)
    while now <= spec.horizon_ms:
        times.append(now)
        now += rng.exponential(mean_gap)
    return np.asarray(times, dtype=np.float64)


def _stops_on_empty(graph: RAGraph, node: GenerationNode) -> bool:
    """True when an out-edge of node loops only while its output is non-empty"""
    return any(
        e.condition is not None and e.condition.name == "nonempty" and e.condition.args[:1] == (node.output_var,)
        for e in graph.out_edges(node.node_id)
    )


def plan_stage_outputs(graph: RAGraph, rounds: int, request_id: int = 0) -> List[str]:
    """Output text of every generation stage a request walks through.

    Loops guarded by nonempty(output) end after `rounds` visits of the
    generating node; every other output is non-empty.
    """
    state = RequestState(request_id, {var: Value(text="q", embedding=np.zeros(1)) for var in ("input", "query")})
    outputs: List[str] = []
    while True:
        node_id = advance(graph, state)
        if node_id == END:
            return outputs
        node = graph.node(node_id)
        if isinstance(node, GenerationNode):
            stop = _stops_on_empty(graph, node) and state.visits[node_id] >= rounds
            text = "" if stop else f"r{request_id}.s{len(outputs)}"
            outputs.append(text)
            if node.output_var:
                state.bind(node.output_var, Value(text=text, embedding=np.zeros(1)))
        else:
            state.bind(node.output_var, Value(doc_ids=(0,)))


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def _token_count(dist: TokenDist, rng: np.random.Generator) -> int:
    raw = rng.normal(dist.mean, dist.std) if dist.std > 0 else dist.mean
    return int(np.clip(round(raw), max(1, dist.min), max(dist.min, dist.max)))


def make_script(final: np.ndarray, total_tokens: int, output_text: str, ratios: Sequence[float],
                spread: float, rng: np.random.Generator, prompt_tokens: int = 0) -> GenerationScript:
    """Checkpoints approach the final embedding as (1 - ratio)**2 * spread"""
    final = np.asarray(final, dtype=np.float32)
    direction = _unit(rng, final.shape[0])
    final_list = final.tolist()
    checkpoints = []
    for ratio in ratios:
        if ratio == 1.0:
            embedding = final_list
        else:
            embedding = (final + (1 - ratio) ** 2 * spread * direction).astype(np.float32).tolist()
        checkpoints.append(Checkpoint(ratio=ratio, embedding=embedding))
    return GenerationScript(
        total_tokens=total_tokens,
        output_text=output_text,
        final_embedding=final_list,
        prefix_checkpoints=checkpoints,
        prompt_tokens=prompt_tokens,
    )


def generate_workload(spec: WorkloadSpec, graphs: Optional[Dict[str, RAGraph]] = None) -> RequestTrace:
    """Sample arrivals, topics and per-stage scripts for every request"""
    q = spec.queries
    graphs = dict(graphs or {})
    for name in q.workflow_mix:
        if name not in graphs:
            graphs[name] = load_workflow(name)

    centers = topic_centers(spec.corpus)
    rng = np.random.default_rng([q.seed, 2])
    arrivals = arrival_times(q.arrival, rng)
    names = sorted(q.workflow_mix)
    mix = np.asarray([q.workflow_mix[n] for n in names], dtype=np.float64)
    topic_p = zipf_probabilities(spec.corpus.n_topics, q.zipf_s)
    dim = spec.corpus.dim

    requests = []
    for request_id, arrival in enumerate(arrivals):
        workflow = names[int(rng.choice(len(names), p=mix))]
        topic = int(rng.choice(spec.corpus.n_topics, p=topic_p))
        rounds = int(rng.integers(1, q.max_rounds + 1))
        outputs = plan_stage_outputs(graphs[workflow], rounds, request_id)

        query = (centers[topic] + rng.standard_normal(dim) * q.query_noise).astype(np.float32)
        current = query.astype(np.float64)
        scripts = []
        for text in outputs:
            current = current + q.drift_delta * _unit(rng, dim)
            scripts.append(make_script(current, _token_count(q.tokens_per_stage, rng), text,
                                       q.checkpoint_ratios, q.checkpoint_spread, rng, q.prompt_tokens))
        requests.append(RequestRecord(
            request_id=request_id,
            arrival_ms=float(arrival),
            workflow=workflow,
            topic=topic,
            query=query.tolist(),
            scripts=scripts,
        ))
    logger.debug("generated %d requests over %d workflows", len(requests), len(names))
    return RequestTrace(dim=dim, requests=requests)


def resolve_graphs(trace: RequestTrace, workflow: Optional[str] = None) -> Dict[str, RAGraph]:
    """Graph per workflow name in the trace; `workflow` forces one graph on every request"""
    names = sorted({r.workflow for r in trace.requests})
    if workflow is not None:
        forced = load_workflow(workflow)
        return {name: forced for name in names}
    return {name: load_workflow(name) for name in names}


# ---------------------------------------------------------------------------
# Measurements

def measure_cluster_skew(index: IvfIndex, trace: RequestTrace, nprobe: int, top_fraction: float = 0.2) -> float:
    """Share of cluster accesses that land in the most accessed top_fraction of clusters"""
    nprobe = min(nprobe, index.n_clusters)
    counts = np.zeros(index.n_clusters, dtype=np.int64)
    for record in trace.requests:
        for query in record.query_chain():
            counts[select_clusters(index, query, nprobe)] += 1
    total = counts.sum()
    if total == 0:
        return 0.0
    top = max(1, int(round(index.n_clusters * top_fraction)))
    return float(np.sort(counts)[::-1][:top].sum() / total)


def measure_locality(index: IvfIndex, trace: RequestTrace, k: int = 10, k_cache: int = 20,
                     nprobe: int = 32) -> Dict[str, float]:
    """Satisfaction rates of the three locality properties over consecutive queries of each request"""
    rows = []
    for record in trace.requests:
        chain = record.query_chain()
        for v, v_prime in zip(chain, chain[1:]):
            rows.append(locality_observations(index, v, v_prime, k, k_cache, nprobe))
    return mean_rate(rows)


def _clusters_until_stop(index: IvfIndex, cursor, streak: int) -> int:
    while not cursor.complete:
        search_step(index, cursor, 1)
        if should_terminate(cursor, streak):
            break
    return cursor.clusters_searched


def measure_termination(index: IvfIndex, trace: RequestTrace, k: int = 10, nprobe: int = 32, streak: int = 4,
                        k_cache: int = 20, delta: Optional[float] = None) -> Dict[str, float]:
    """Mean clusters searched before early termination, cold versus seeded and reordered"""
    nprobe = min(nprobe, index.n_clusters)
    delta = delta if delta is not None else 0.8 * index.mean_nearest_centroid_distance()
    probe_k = min(k, k_cache)
    unordered, reordered = [], []
    for record in trace.requests:
        chain = record.query_chain()
        for v, v_prime in zip(chain, chain[1:]):
            unordered.append(_clusters_until_stop(index, open_cursor(index, v_prime, k, nprobe), streak))

            extended = search(index, v, k_cache, nprobe)
            cache = LocalityCache(k_cache)
            record_search(cache, record.request_id, index.prepare_query(v), extended,
                          result_clusters(index, extended), select_clusters(index, v, nprobe))
            plan = select_clusters(index, v_prime, nprobe)
            probe = probe_cache(cache, record.request_id, index.prepare_query(v_prime), probe_k, delta, index, plan)
            cursor = open_cursor(index, v_prime, k, nprobe, seed=probe.seed if probe else None)
            if probe is not None:
                cursor.reorder_remaining(reorder_clusters(plan, probe.hints))
            reordered.append(_clusters_until_stop(index, cursor, streak))
    if not unordered:
        return {"pairs": 0, "unordered": 0.0, "reordered": 0.0}
    return {"pairs": len(unordered), "unordered": float(np.mean(unordered)), "reordered": float(np.mean(reordered))}
