"""
Serving loop: wavefront selection, sub-stage budgeting, speculation and
dispatch to the generation and retrieval workers.

SchedulerCore holds every scheduling decision. It talks to the workers only
through messages (GenSubmit, GenCancel, RetSubmit, RetCancel, RetBatch) and
reacts to their step reports. VirtualDriver runs core and workers on one
simulated clock; LiveDriver runs each worker in its own thread on wallclock.
"""
import heapq
import logging
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .generation_engine import GenerationEngine, GenerationScript, GenStepReport, partial_embedding
from .logging import RunTracer
from .raggraph import (END, GenerationNode, GraphInstance, LoopGuardError, RAGraph, RequestState, RetrievalNode,
                       Value, WorkflowError, advance)
from .report import CacheStats, ExperimentReport, IdleStats, LaneStats, RequestOutcome, SpeculationStats, StageStats, percentile
from .retrieval_engine import (BatchItem, Origin, RetrievalEngine, RetrievalStepReport, RetrievalTask, SubStageBatch,
                               cluster_cost_ms)
from .similarity import LocalityCache, probe_cache, record_search, reorder_clusters, result_clusters, semantic_drift, validate_speculation
from .tiered_cache import TieredCache
from .types import (CacheConfig, Calibration, Clock, GenLatencyModel, LinearThroughputModel, RetrievalCostModel, RunConfig, SchedulerConfig,
                    Strategy)
from .vector_index import IvfIndex, SearchCursor, TopKResult, select_clusters
from .workload import RequestRecord, RequestTrace, resolve_graphs

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Budgeting and speculation policy

def expected_latency_gain(mb: float, t_retrieval: float, beta: float, printed_sign: bool = False) -> float:
    """Expected latency improvement of splitting retrieval into mb-sized sub-stages"""
    if mb <= 0:
        raise ValueError(f"mb must be positive, got {mb}")
    overhead = (t_retrieval / mb) * beta
    return (t_retrieval - mb) / 2 + (overhead if printed_sign else -overhead)


def numeric_time_budget(t_retrieval: float, beta: float, points: int = 1000, min_budget: float = 0.1,
                        printed_sign: bool = False) -> float:
    """Grid argmax of expected_latency_gain over (0, t_retrieval]"""
    grid = t_retrieval * np.arange(1, points + 1) / points
    gains = [expected_latency_gain(mb, t_retrieval, beta, printed_sign) for mb in grid]
    best = float(grid[int(np.argmax(gains))])
    return min(max(best, min_budget), t_retrieval)


def compute_time_budget(t_retrieval: float, beta: float, min_budget: float = 0.1, printed_sign: bool = False) -> float:
    """Sub-stage budget mb* = sqrt(2 * beta * t_retrieval), clamped to [min_budget, t_retrieval]"""
    if t_retrieval <= 0 or beta <= 0:
        raise ValueError("t_retrieval and beta must be positive")
    if printed_sign:
        return numeric_time_budget(t_retrieval, beta, min_budget=min_budget, printed_sign=True)
    return min(max(math.sqrt(2 * beta * t_retrieval), min_budget), t_retrieval)


@dataclass(frozen=True)
class WavefrontEntry:
    arrival_ms: float
    request_id: int
    node_id: int
    kind: str
    ready: bool = True
    remaining: Tuple[int, ...] = ()
    tokens_left: int = 0


def select_wavefront(pending: Iterable[WavefrontEntry]) -> List[WavefrontEntry]:
    """Dependency-ready entries ordered by (arrival, request, node)"""
    return sorted((e for e in pending if e.ready), key=lambda e: (e.arrival_ms, e.request_id, e.node_id))


@dataclass
class SubStagePlan:
    items: List[Tuple[int, int, List[int]]] = field(default_factory=list)
    planned_cost_ms: float = 0.0
    gen_windows: Dict[Tuple[int, int], int] = field(default_factory=dict)


def plan_substages(wavefront: Sequence[WavefrontEntry], mb: float, cost_fn: Callable[[int], float],
                   expected_step_ms: float = 1.0) -> SubStagePlan:
    """Round-robin clusters into a sub-stage until the budget mb is filled.

    Every retrieval entry gets its next cluster; afterwards an entry whose next
    cluster would overflow mb leaves the round. Generation entries get a window
    of ceil(mb / expected_step_ms) decode steps.
    """
    if mb <= 0:
        raise ValueError(f"mb must be positive, got {mb}")
    plan = SubStagePlan()
    retrieval = [e for e in wavefront if e.kind == "retrieval" and e.remaining]
    taken = [[e.remaining[0]] for e in retrieval]
    cost = sum(cost_fn(e.remaining[0]) for e in retrieval)

    open_entries = [i for i, e in enumerate(retrieval) if len(e.remaining) > 1]
    while open_entries:
        still_open = []
        for i in open_entries:
            entry = retrieval[i]
            nxt = entry.remaining[len(taken[i])]
            c = cost_fn(nxt)
            if cost + c > mb:
                continue
            cost += c
            taken[i].append(nxt)
            if len(taken[i]) < len(entry.remaining):
                still_open.append(i)
        open_entries = still_open

    plan.items = [(e.request_id, e.node_id, taken[i]) for i, e in enumerate(retrieval)]
    plan.planned_cost_ms = cost
    window = max(1, math.ceil(mb / expected_step_ms)) if expected_step_ms > 0 else 1
    for e in wavefront:
        if e.kind == "generation" and e.tokens_left > 0:
            plan.gen_windows[(e.request_id, e.node_id)] = min(window, e.tokens_left)
    return plan


@dataclass(frozen=True)
class ThroughputEstimate:
    t_curr: float
    t_max: float

    @property
    def ratio(self) -> float:
        return self.t_curr / self.t_max


def throughput_estimate(active_requests: int, prefill_tokens: int,
                        model: Optional[LinearThroughputModel]) -> ThroughputEstimate:
    if model is None:
        raise RuntimeError("throughput estimate needs a calibration; run `ragsim bench` first")
    t_curr = model.a * active_requests + model.b * prefill_tokens
    return ThroughputEstimate(t_curr=t_curr, t_max=model.t_max)


def trigger_speculation(estimate: ThroughputEstimate, tau: float) -> bool:
    if estimate.t_max <= 0:
        raise ValueError("t_max must be positive")
    return estimate.t_curr / estimate.t_max < tau


@dataclass(frozen=True)
class Candidate:
    request_id: int
    node_id: int
    score: float
    prefill_tokens: int = 0


def choose_speculative_candidates(candidates: Sequence[Candidate], estimate: ThroughputEstimate, tau: float,
                                  model: LinearThroughputModel) -> List[Candidate]:
    """Greedy lowest-score-first selection while the estimate stays below tau"""
    chosen: List[Candidate] = []
    for candidate in sorted(candidates, key=lambda c: (c.score, c.request_id, c.node_id)):
        if not trigger_speculation(estimate, tau):
            break
        chosen.append(candidate)
        estimate = ThroughputEstimate(
            t_curr=estimate.t_curr + model.a + model.b * candidate.prefill_tokens,
            t_max=estimate.t_max,
        )
    return chosen


# ---------------------------------------------------------------------------
# Worker messages

@dataclass(frozen=True)
class GenSubmit:
    request_id: int
    subnode: object
    total_tokens: int
    prefill_tokens: int = 0


@dataclass(frozen=True)
class GenCancel:
    request_id: int


@dataclass(frozen=True)
class RetSubmit:
    task: RetrievalTask


@dataclass(frozen=True)
class RetCancel:
    request_id: int
    node_id: int


@dataclass(frozen=True)
class RetBatch:
    batch: SubStageBatch
    overhead_ms: float


Message = Union[GenSubmit, GenCancel, RetSubmit, RetCancel, RetBatch]


def deliver(message: Message, gen_engine: GenerationEngine, ret_engine: RetrievalEngine) -> None:
    """Apply a submit/cancel message to the worker that owns it"""
    if isinstance(message, GenSubmit):
        gen_engine.submit(message.request_id, message.subnode, message.total_tokens, message.prefill_tokens)
    elif isinstance(message, GenCancel):
        gen_engine.cancel(message.request_id)
    elif isinstance(message, RetSubmit):
        ret_engine.submit(message.task)
    elif isinstance(message, RetCancel):
        ret_engine.cancel(message.request_id, message.node_id)
    else:
        raise TypeError(f"{type(message).__name__} is not a submit or cancel message")


# ---------------------------------------------------------------------------
# Per-request runtime state

@dataclass
class GenStage:
    node_id: int
    script: GenerationScript
    tail: int
    started_at: float
    speculative: bool = False
    active: Optional[int] = None
    tokens_done: int = 0
    last_partial: Optional[np.ndarray] = None


@dataclass
class RetStage:
    node_id: int
    origin: Origin
    tail: int
    plan: List[int]
    query: np.ndarray
    k: int
    topk: int
    started_at: float
    heap: TopKResult = field(default_factory=TopKResult.empty)
    next_pos: int = 0
    last_head: Optional[int] = None
    queued: bool = False

    @property
    def remaining(self) -> List[int]:
        return self.plan[self.next_pos:]


@dataclass
class SpecGen:
    anchor: int
    ret_node: int
    gen_node: int
    partial: TopKResult
    held: bool = False


@dataclass
class RequestRun:
    record: RequestRecord
    graph: RAGraph
    state: RequestState
    instance: GraphInstance
    status: str = "running"
    gen: Optional[GenStage] = None
    rets: Dict[int, RetStage] = field(default_factory=dict)
    spec: Optional[SpecGen] = None
    finish_ms: Optional[float] = None
    error: Optional[str] = None
    stages: List[Tuple[str, int, float, float]] = field(default_factory=list)

    @property
    def request_id(self) -> int:
        return self.record.request_id


# ---------------------------------------------------------------------------
# Scheduler

class SchedulerCore:
    """Single scheduling code path shared by the virtual and live drivers"""

    def __init__(self, config: SchedulerConfig, index: IvfIndex, graphs: Dict[str, RAGraph],
                 gen_latency: GenLatencyModel, cost: RetrievalCostModel,
                 calibration: Optional[Calibration] = None, tracer: Optional[RunTracer] = None):
        self.config = config
        self.index = index
        self.graphs = graphs
        self.gen_latency = gen_latency
        self.cost = cost
        self.calibration = calibration if calibration is not None else Calibration()
        self.tracer = tracer or RunTracer()
        self.strategy = config.strategy
        self.hedra = config.strategy == Strategy.HEDRA
        self.speculation = self.hedra and config.speculation
        self.nprobe = min(config.nprobe, index.n_clusters)
        self.locality = LocalityCache(config.k_cache)
        self.delta = config.delta if config.delta is not None else 0.8 * index.mean_nearest_centroid_distance()
        self.beta_ms = config.beta_ms
        self.t_retrieval = config.initial_t_retrieval_ms

        self.runs: Dict[int, RequestRun] = {}
        self.outbox: List[Message] = []
        self.ret_busy = False
        self._coarse_queue: Deque[Tuple[int, str, int]] = deque()
        self._coarse_owner: Optional[int] = None
        self._naive_queue: List[Tuple[int, int]] = []

        self.gen_busy_ms = 0.0
        self.ret_busy_ms = 0.0
        self.slow_ms = 0.0
        self.fast_ms = 0.0
        self.slow_clusters = 0
        self.fast_clusters = 0
        self.substages = 0
        self.seeded = 0
        self.clusters_searched: List[int] = []
        self.spec_gen_launched = 0
        self.spec_ret_launched = 0
        self.spec_valid = 0
        self.spec_mismatch = 0
        self.last_budget_ms = config.mb_override or 0.0

    # -- bookkeeping ---------------------------------------------------------

    def drain(self) -> List[Message]:
        messages, self.outbox = self.outbox, []
        return messages

    @property
    def done(self) -> bool:
        return all(run.status != "running" for run in self.runs.values())

    def current_budget(self) -> float:
        if self.config.mb_override is not None:
            return self.config.mb_override
        return compute_time_budget(self.t_retrieval, self.beta_ms, self.config.min_budget_ms, self.config.printed_sign)

    def _cost(self, cluster_id: int) -> float:
        return cluster_cost_ms(self.index, self.cost, cluster_id, "slow")

    def _trace(self, now: float, event: str, run: Optional[RequestRun] = None, subnode: Optional[int] = None, **detail) -> None:
        self.tracer.record(now, "scheduler", run.request_id if run else None, subnode, event, 0.0, **detail)

    # -- request lifecycle ---------------------------------------------------

    def on_arrival(self, record: RequestRecord, now: float) -> None:
        graph = self.graphs[record.workflow]
        query = np.asarray(record.query, dtype=np.float32)
        state = RequestState(record.request_id, {
            "input": Value(text=f"request-{record.request_id}", embedding=query),
            "query": Value(text=f"request-{record.request_id}", embedding=query),
        })
        run = RequestRun(record=record, graph=graph, state=state, instance=GraphInstance(graph, record.request_id))
        self.runs[record.request_id] = run
        self._trace(now, "arrive", run, workflow=record.workflow)
        self._step_forward(run, now)
        self.pump(now)

    def on_timeout(self, request_id: int, now: float) -> None:
        run = self.runs.get(request_id)
        if run is not None and run.status == "running":
            self._fail(run, now, f"exceeded slo of {self.config.slo_ms} ms")
            self.pump(now)

    def _step_forward(self, run: RequestRun, now: float) -> None:
        try:
            self._enter(run, advance(run.graph, run.state), now)
        except (WorkflowError, LoopGuardError) as e:
            self._fail(run, now, str(e))

    def _enter(self, run: RequestRun, node_id: int, now: float) -> None:
        if node_id == END:
            self._finish(run, now)
            return
        spec = run.graph.node(node_id)
        if isinstance(spec, GenerationNode):
            self._start_gen(run, spec, now)
        else:
            self._start_ret(run, spec, now)

    def _finish(self, run: RequestRun, now: float) -> None:
        run.status = "done"
        run.finish_ms = now
        self.locality.evict(run.request_id)
        self._trace(now, "done", run)

    def _fail(self, run: RequestRun, now: float, reason: str) -> None:
        logger.warning("request %d failed: %s", run.request_id, reason)
        run.status = "failed"
        run.error = reason
        run.finish_ms = now
        if run.gen is not None:
            self.outbox.append(GenCancel(run.request_id))
            run.gen = None
        for node_id in list(run.rets):
            self.outbox.append(RetCancel(run.request_id, node_id))
        run.rets.clear()
        run.spec = None
        self._coarse_queue = deque(e for e in self._coarse_queue if e[0] != run.request_id)
        self._naive_queue = [e for e in self._naive_queue if e[0] != run.request_id]
        if self._coarse_owner == run.request_id:
            self._coarse_owner = None
        self.locality.evict(run.request_id)
        self._trace(now, "failed", run, reason=reason)

    # -- generation ----------------------------------------------------------

    def _take_script(self, run: RequestRun) -> GenerationScript:
        index = run.state.gen_cursor
        if index >= len(run.record.scripts):
            raise WorkflowError(f"request {run.request_id} has no script for generation stage #{index}")
        run.state.gen_cursor += 1
        return run.record.scripts[index]

    def _start_gen(self, run: RequestRun, node: GenerationNode, now: float, speculative: bool = False,
                   deps: Iterable[int] = (), anchor: Optional[int] = None, rewire_to: Optional[Iterable[int]] = None) -> int:
        script = self._take_script(run)
        sub = run.instance.open_stage(node.node_id, script.total_tokens, deps=deps, speculative=speculative, anchor=anchor)
        if rewire_to is not None:
            run.instance.rewire_dependency(sub.subnode_id, rewire_to)
        run.gen = GenStage(node_id=node.node_id, script=script, tail=sub.subnode_id, started_at=now, speculative=speculative)
        self._trace(now, "gen_start", run, sub.subnode_id, node=node.node_id, speculative=speculative)
        if self.strategy == Strategy.COARSE:
            self._coarse_queue.append((run.request_id, "generation", node.node_id))
        else:
            self._submit_gen_window(run)
        return sub.subnode_id

    def _submit_gen_window(self, run: RequestRun) -> None:
        g = run.gen
        total = g.script.total_tokens
        remaining = total - g.tokens_done
        window = remaining
        if self.hedra:
            entry = WavefrontEntry(run.record.arrival_ms, run.request_id, g.node_id, "generation", tokens_left=remaining)
            active = sum(1 for r in self.runs.values() if r.gen is not None)
            plan = plan_substages([entry], self.current_budget(), self._cost, self.gen_latency.expected_step_ms(max(1, active)))
            window = plan.gen_windows[(run.request_id, g.node_id)]
        if window < remaining:
            sub, _ = run.instance.split_subnode(g.tail, g.tokens_done + window)
        else:
            sub = run.instance.subnodes[g.tail]
        g.active = sub.subnode_id
        prefill = g.script.prompt_tokens if sub.span[0] == 0 else 0
        self.outbox.append(GenSubmit(run.request_id, sub, total, prefill))

    def on_gen_report(self, report: GenStepReport, now: float) -> None:
        if report.batch_size:
            self.gen_busy_ms += report.step_latency_ms
            self.tracer.record(now - report.step_latency_ms, "generation", None, None, "step",
                               report.step_latency_ms, batch=report.batch_size)
        candidates: List[Tuple[RequestRun, np.ndarray, float, int, int]] = []
        for done in report.completed:
            run = self.runs.get(done.request_id)
            if run is None or run.status != "running" or run.gen is None or run.gen.active != done.subnode_id:
                continue
            g = run.gen
            g.tokens_done = done.tokens_done
            g.active = None
            if g.tokens_done < g.script.total_tokens:
                if self.speculation and not g.speculative:
                    candidate = self._spec_retrieval_candidate(run, done.subnode_id)
                    if candidate is not None:
                        candidates.append(candidate)
                self._submit_gen_window(run)
            elif run.spec is not None:
                run.spec.held = True
                self._trace(now, "spec_gen_held", run, done.subnode_id)
            else:
                self._complete_gen(run, now)
        if candidates:
            self._launch_spec_retrievals(candidates, now)
        self.pump(now)

    def _complete_gen(self, run: RequestRun, now: float) -> None:
        g = run.gen
        node = run.graph.node(g.node_id)
        if node.output_var:
            run.state.bind(node.output_var, Value(text=g.script.output_text, embedding=g.script.final_vector()))
        run.stages.append(("generation", g.node_id, g.started_at, now))
        run.gen = None
        self._trace(now, "gen_end", run, g.tail, node=g.node_id)
        if self._coarse_owner == run.request_id:
            self._coarse_owner = None
        self._step_forward(run, now)

    # -- retrieval -----------------------------------------------------------

    def _start_ret(self, run: RequestRun, node: RetrievalNode, now: float) -> None:
        value = run.state.get(node.query_var)
        if value is None or value.embedding is None:
            raise WorkflowError(f"variable {node.query_var!r} carries no embedding for node {node.node_id}")
        query = self.index.prepare_query(value.embedding)
        plan = select_clusters(self.index, value.embedding, self.nprobe)
        topk = self.config.topk or node.topk
        k = max(topk, self.config.k_cache) if self.hedra else topk
        sub = run.instance.open_stage(node.node_id, len(plan), clusters=plan)

        seed: Optional[TopKResult] = None
        if self.hedra:
            previous = run.rets.pop(node.node_id, None)
            if previous is not None:
                self.outbox.append(RetCancel(run.request_id, node.node_id))
            probe = probe_cache(self.locality, run.request_id, query, min(k, self.locality.k_cache), self.delta, self.index, plan)
            if probe is not None:
                sub = run.instance.reorder_stage(sub.subnode_id, reorder_clusters(plan, probe.hints))
                plan = list(sub.clusters)
                seed = probe.seed
                self.seeded += 1

        cursor = SearchCursor(query=query, plan=plan, k=k)
        if seed is not None and len(seed):
            cursor.heap = seed.truncate(k)
        ret = RetStage(node_id=node.node_id, origin=Origin.NORMAL, tail=sub.subnode_id, plan=plan,
                       query=query, k=k, topk=topk, started_at=now, heap=cursor.heap)
        run.rets[node.node_id] = ret
        self.outbox.append(RetSubmit(RetrievalTask(run.request_id, node.node_id, sub.subnode_id, cursor.copy())))
        self._trace(now, "ret_start", run, sub.subnode_id, node=node.node_id, seeded=seed is not None)
        if self.strategy == Strategy.COARSE:
            self._coarse_queue.append((run.request_id, "retrieval", node.node_id))
        elif self.strategy == Strategy.NAIVE:
            self._naive_queue.append((run.request_id, node.node_id))

    def _whole_item(self, run: RequestRun, ret: RetStage) -> BatchItem:
        return BatchItem(run.request_id, ret.node_id, ret.tail, list(ret.remaining))

    def _dispatch(self, items: List[BatchItem], planned_cost: float, now: float) -> None:
        batch = SubStageBatch(items=items, planned_cost_ms=planned_cost)
        self.outbox.append(RetBatch(batch, self.beta_ms))
        self.ret_busy = True
        self.substages += 1

    def pump(self, now: float) -> None:
        """Start whatever work the strategy allows right now"""
        if self.strategy == Strategy.COARSE:
            self._pump_coarse(now)
        elif not self.ret_busy:
            if self.strategy == Strategy.NAIVE:
                self._pump_naive(now)
            else:
                self._pump_hedra(now)

    def _pump_coarse(self, now: float) -> None:
        while self._coarse_owner is None and self._coarse_queue:
            request_id, kind, node_id = self._coarse_queue.popleft()
            run = self.runs[request_id]
            if run.status != "running":
                continue
            self._coarse_owner = request_id
            if kind == "generation":
                self._submit_gen_window(run)
            else:
                ret = run.rets[node_id]
                self._dispatch([self._whole_item(run, ret)], sum(map(self._cost, ret.remaining)), now)

    def _pump_naive(self, now: float) -> None:
        items = []
        for request_id, node_id in self._naive_queue:
            run = self.runs[request_id]
            if run.status == "running" and node_id in run.rets:
                items.append(self._whole_item(run, run.rets[node_id]))
        self._naive_queue = []
        if items:
            self._dispatch(items, sum(self._cost(c) for item in items for c in item.clusters), now)

    def _pump_hedra(self, now: float) -> None:
        entries = []
        for run in self.runs.values():
            if run.status != "running":
                continue
            for ret in run.rets.values():
                if ret.remaining:
                    entries.append(WavefrontEntry(run.record.arrival_ms, run.request_id, ret.node_id, "retrieval",
                                                  remaining=tuple(ret.remaining)))
        wavefront = select_wavefront(entries)
        if not wavefront:
            return
        mb = self.current_budget()
        self.last_budget_ms = mb
        plan = plan_substages(wavefront, mb, self._cost)
        items = []
        for request_id, node_id, clusters in plan.items:
            run = self.runs[request_id]
            ret = run.rets[node_id]
            if len(clusters) < len(ret.remaining):
                head, _ = run.instance.split_subnode(ret.tail, ret.next_pos + len(clusters))
                items.append(BatchItem(request_id, node_id, head.subnode_id, clusters))
            else:
                items.append(BatchItem(request_id, node_id, ret.tail, clusters))
        self._dispatch(items, plan.planned_cost_ms, now)

    def on_ret_report(self, report: RetrievalStepReport, overhead_ms: float, now: float) -> None:
        self.ret_busy = False
        busy = overhead_ms + report.latency_ms
        self.ret_busy_ms += busy
        self.slow_ms += report.slow_ms
        self.fast_ms += report.fast_ms
        self.slow_clusters += report.slow_clusters
        self.fast_clusters += report.fast_clusters
        self.tracer.record(now - busy, "retrieval", None, None, "substage", busy,
                           items=len(report.items), fast=report.fast_clusters, slow=report.slow_clusters)

        for item in report.items:
            run = self.runs.get(item.request_id)
            if run is None or run.status != "running":
                continue
            ret = run.rets.get(item.node_id)
            if ret is None or ret.origin != item.origin:
                continue
            ret.next_pos += len(item.clusters)
            searched = ret.next_pos
            ret.heap = item.heap
            ret.last_head = item.subnode_id
            if item.complete:
                ret.next_pos = len(ret.plan)
                if ret.origin == Origin.SPECULATIVE:
                    self._complete_spec_ret(run, ret, now)
                else:
                    self.clusters_searched.append(searched)
                    self._complete_ret(run, ret, now, terminated=item.terminated)
        if self.speculation:
            self._launch_spec_gens(now)
        self.pump(now)

    def _complete_ret(self, run: RequestRun, ret: RetStage, now: float, terminated: bool = False) -> None:
        del run.rets[ret.node_id]
        node = run.graph.node(ret.node_id)
        final = ret.heap.truncate(ret.topk)
        run.stages.append(("retrieval", ret.node_id, ret.started_at, now))
        alpha = self.config.ewma_alpha
        self.t_retrieval = alpha * (now - ret.started_at) + (1 - alpha) * self.t_retrieval
        if self.hedra:
            record_search(self.locality, run.request_id, ret.query, ret.heap,
                          result_clusters(self.index, ret.heap.truncate(self.locality.k_cache)), ret.plan)
        self._trace(now, "ret_end", run, ret.tail, node=ret.node_id, terminated=terminated)
        if self._coarse_owner == run.request_id:
            self._coarse_owner = None
        value = Value(doc_ids=tuple(int(i) for i in final.ids))

        spec = run.spec
        if spec is not None and spec.ret_node == ret.node_id:
            run.spec = None
            outcome = validate_speculation(spec.partial, final, ret.topk, self.config.validation_mode,
                                           self.config.recall_threshold)
            if outcome.valid:
                self.spec_valid += 1
                run.state.discard(spec.anchor)
                run.state.bind(node.output_var, value)
                self._trace(now, "spec_valid", run, node=ret.node_id)
                if spec.held:
                    self._complete_gen(run, now)
                else:
                    run.gen.speculative = False
                return
            self.spec_mismatch += 1
            logger.debug("request %d: speculation on node %d mismatched, rolling back", run.request_id, ret.node_id)
            if run.gen is not None:
                self.outbox.append(GenCancel(run.request_id))
                run.gen = None
            run.state.restore(spec.anchor)
            run.state.discard(spec.anchor)
            self._trace(now, "rollback", run, node=ret.node_id, overlap=outcome.overlap)

        run.state.bind(node.output_var, value)
        self._step_forward(run, now)

    def _complete_spec_ret(self, run: RequestRun, ret: RetStage, now: float) -> None:
        del run.rets[ret.node_id]
        record_search(self.locality, run.request_id, ret.query, ret.heap,
                      result_clusters(self.index, ret.heap.truncate(self.locality.k_cache)), ret.plan)
        self._trace(now, "spec_ret_end", run, ret.tail, node=ret.node_id)

    # -- speculation ---------------------------------------------------------

    def _successor(self, run: RequestRun, var: Optional[str], value: Value) -> Optional[int]:
        """Node the request would enter next if var were bound to value"""
        probe = run.state.clone()
        if var:
            probe.bind(var, value)
        try:
            return advance(run.graph, probe)
        except (WorkflowError, LoopGuardError):
            return None

    def _launch_spec_gens(self, now: float) -> None:
        candidates: List[Candidate] = []
        for run in self.runs.values():
            if run.status != "running" or run.spec is not None or run.gen is not None:
                continue
            for ret in run.rets.values():
                if ret.origin != Origin.NORMAL or not ret.remaining or len(ret.heap) < ret.topk or ret.last_head is None:
                    continue
                if run.state.current != ret.node_id or run.state.gen_cursor >= len(run.record.scripts):
                    continue
                node = run.graph.node(ret.node_id)
                partial = ret.heap.truncate(ret.topk)
                target = self._successor(run, node.output_var, Value(doc_ids=tuple(int(i) for i in partial.ids)))
                if target is None or target == END or not isinstance(run.graph.node(target), GenerationNode):
                    continue
                score = float(np.mean(np.sqrt(partial.distances)))
                prefill = run.record.scripts[run.state.gen_cursor].prompt_tokens
                candidates.append(Candidate(run.request_id, ret.node_id, score, prefill))
        if not candidates:
            return

        active = [r for r in self.runs.values() if r.gen is not None]
        prefill = sum(r.gen.script.prompt_tokens for r in active if r.gen.tokens_done == 0)
        estimate = throughput_estimate(len(active), prefill, self.calibration.gen)
        for candidate in choose_speculative_candidates(candidates, estimate, self.config.tau, self.calibration.gen):
            self._launch_spec_gen(self.runs[candidate.request_id], self.runs[candidate.request_id].rets[candidate.node_id], now)

    def _launch_spec_gen(self, run: RequestRun, ret: RetStage, now: float) -> None:
        node = run.graph.node(ret.node_id)
        partial = ret.heap.truncate(ret.topk)
        anchor = run.state.snapshot()
        run.state.bind(node.output_var, Value(doc_ids=tuple(int(i) for i in partial.ids)))
        target = advance(run.graph, run.state)
        run.instance.insert_speculative_edge(ret.last_head, target, anchor)
        run.spec = SpecGen(anchor=anchor, ret_node=ret.node_id, gen_node=target, partial=partial)
        sub_id = self._start_gen(run, run.graph.node(target), now, speculative=True, deps={ret.tail}, anchor=anchor,
                                 rewire_to={ret.last_head})
        self.spec_gen_launched += 1
        self._trace(now, "spec_gen", run, sub_id, node=target, anchor=anchor)

    def _spec_retrieval_candidate(self, run: RequestRun, head: int):
        g = run.gen
        script = g.script
        if not script.prefix_checkpoints:
            return None
        partial = partial_embedding(script, g.tokens_done / script.total_tokens)
        previous, g.last_partial = g.last_partial, partial
        if previous is None:
            return None
        node = run.graph.node(g.node_id)
        target = self._successor(run, node.output_var, Value(text=script.output_text, embedding=partial))
        if target is None or target == END or target in run.rets:
            return None
        spec = run.graph.node(target)
        if not isinstance(spec, RetrievalNode) or spec.query_var != node.output_var:
            return None
        return run, partial, semantic_drift(previous, partial), target, head

    def _launch_spec_retrievals(self, candidates, now: float) -> None:
        by_key = {(c[0].request_id, c[3]): c for c in candidates}
        scored = [Candidate(run.request_id, target, drift) for run, _, drift, target, _ in candidates]
        active = sum(len(r.rets) for r in self.runs.values() if r.status == "running")
        estimate = throughput_estimate(active, 0, self.calibration.ret)
        for chosen in choose_speculative_candidates(scored, estimate, self.config.tau, self.calibration.ret):
            run, partial, _, target, head = by_key[(chosen.request_id, chosen.node_id)]
            plan = select_clusters(self.index, partial, self.nprobe)
            sub = run.instance.open_stage(target, len(plan), clusters=plan, deps={run.gen.tail}, speculative=True)
            run.instance.rewire_dependency(sub.subnode_id, {head})
            run.instance.insert_speculative_edge(head, target, None)
            query = self.index.prepare_query(partial)
            k = self.config.k_cache
            run.rets[target] = RetStage(node_id=target, origin=Origin.SPECULATIVE, tail=sub.subnode_id, plan=plan,
                                        query=query, k=k, topk=k, started_at=now)
            cursor = SearchCursor(query=query, plan=plan, k=k)
            self.outbox.append(RetSubmit(RetrievalTask(run.request_id, target, sub.subnode_id, cursor, Origin.SPECULATIVE)))
            self.spec_ret_launched += 1
            self._trace(now, "spec_ret", run, sub.subnode_id, node=target)

    # -- reporting -----------------------------------------------------------

    def build_report(self, clock: Clock, cache: Optional[TieredCache] = None,
                     wallclock_ms: Optional[float] = None) -> ExperimentReport:
        runs = [self.runs[k] for k in sorted(self.runs)]
        outcomes = []
        for run in runs:
            latency = run.finish_ms - run.record.arrival_ms if run.status == "done" else None
            outcomes.append(RequestOutcome(
                request_id=run.request_id,
                workflow=run.record.workflow,
                arrival_ms=run.record.arrival_ms,
                finish_ms=run.finish_ms,
                latency_ms=latency,
                status=run.status,
                error=run.error,
                bindings={name: value.to_dict() for name, value in sorted(run.state.bindings.items())},
            ))
        latencies = [o.latency_ms for o in outcomes if o.latency_ms is not None]
        finished = [r.finish_ms for r in runs if r.finish_ms is not None]
        makespan = max(finished) - min(r.record.arrival_ms for r in runs) if finished else 0.0
        completed = sum(1 for o in outcomes if o.status == "done")

        def share(busy: float) -> float:
            return min(busy / makespan, 1.0) if makespan > 0 else 0.0

        stages: Dict[str, StageStats] = {}
        for kind in ("generation", "retrieval"):
            durations = [end - start for run in runs for k, _, start, end in run.stages if k == kind]
            stages[kind] = StageStats(
                count=len(durations),
                mean_ms=float(np.mean(durations)) if durations else 0.0,
                total_ms=float(np.sum(durations)) if durations else 0.0,
            )
        judged = self.spec_valid + self.spec_mismatch
        return ExperimentReport(
            strategy=self.strategy.value,
            clock=clock.value,
            seed=self.config.seed,
            n_requests=len(runs),
            completed=completed,
            failed=sum(1 for o in outcomes if o.status == "failed"),
            requests=outcomes,
            mean_latency_ms=float(np.mean(latencies)) if latencies else 0.0,
            latency_p50_ms=percentile(latencies, 50),
            latency_p95_ms=percentile(latencies, 95),
            latency_p99_ms=percentile(latencies, 99),
            throughput_rps=completed / (makespan / 1e3) if makespan > 0 else 0.0,
            makespan_ms=makespan,
            speculation=SpeculationStats(
                gen_launched=self.spec_gen_launched,
                ret_launched=self.spec_ret_launched,
                valid=self.spec_valid,
                mismatch=self.spec_mismatch,
                rollbacks=self.spec_mismatch,
                accuracy=self.spec_valid / judged if judged else 0.0,
            ),
            cache=CacheStats(
                enabled=cache is not None,
                capacity_gc=cache.capacity_gc if cache is not None else 0,
                hits=cache.hits if cache is not None else 0,
                misses=cache.misses if cache is not None else 0,
                hit_rate=cache.hit_rate if cache is not None else 0.0,
                swaps_in=cache.swaps_in if cache is not None else 0,
                swaps_out=cache.swaps_out if cache is not None else 0,
            ),
            lanes=LaneStats(
                slow_ms=self.slow_ms,
                fast_ms=self.fast_ms,
                slow_clusters=self.slow_clusters,
                fast_clusters=self.fast_clusters,
                slow_utilization=share(self.slow_ms),
                fast_utilization=share(self.fast_ms),
            ),
            idle=IdleStats(generation=1.0 - share(self.gen_busy_ms), retrieval=1.0 - share(self.ret_busy_ms)),
            stages=stages,
            substages=self.substages,
            seeded_searches=self.seeded,
            mean_clusters_searched=float(np.mean(self.clusters_searched)) if self.clusters_searched else 0.0,
            budget_ms=self.last_budget_ms,
            wallclock_ms=wallclock_ms,
        )


# ---------------------------------------------------------------------------
# Drivers

class VirtualDriver:
    """Deterministic discrete-event execution on a simulated clock"""

    def __init__(self, core: SchedulerCore, gen_engine: GenerationEngine, ret_engine: RetrievalEngine):
        self.core = core
        self.gen_engine = gen_engine
        self.ret_engine = ret_engine
        self._events: List[Tuple[float, int, str, object]] = []
        self._seq = 0
        self._gen_busy = False

    def _push(self, at: float, kind: str, payload: object) -> None:
        heapq.heappush(self._events, (at, self._seq, kind, payload))
        self._seq += 1

    def _flush(self, now: float) -> None:
        for message in self.core.drain():
            if isinstance(message, RetBatch):
                report = self.ret_engine.step(message.batch, now)
                self._push(now + message.overhead_ms + report.latency_ms, "retrieval", (report, message.overhead_ms))
            else:
                deliver(message, self.gen_engine, self.ret_engine)
        if not self._gen_busy and self.gen_engine.has_work():
            report = self.gen_engine.step()
            self._gen_busy = True
            self._push(now + report.step_latency_ms, "generation", report)

    def run(self, trace: RequestTrace) -> float:
        for record in sorted(trace.requests, key=lambda r: (r.arrival_ms, r.request_id)):
            self._push(record.arrival_ms, "arrival", record)
        if self.core.config.slo_ms is not None:
            for record in trace.requests:
                self._push(record.arrival_ms + self.core.config.slo_ms, "timeout", record.request_id)

        now = 0.0
        while self._events:
            now, _, kind, payload = heapq.heappop(self._events)
            if kind == "arrival":
                self.core.on_arrival(payload, now)
            elif kind == "timeout":
                self.core.on_timeout(payload, now)
            elif kind == "generation":
                self._gen_busy = False
                self.core.on_gen_report(payload, now)
            else:
                report, overhead = payload
                self.core.on_ret_report(report, overhead, now)
            self._flush(now)
        return now


class LiveDriver:
    """Worker threads exchanging messages with the scheduler over queues"""

    def __init__(self, core: SchedulerCore, gen_engine: GenerationEngine, ret_engine: RetrievalEngine):
        self.core = core
        self.gen_engine = gen_engine
        self.ret_engine = ret_engine
        self._gen_inbox: "queue.Queue" = queue.Queue()
        self._ret_inbox: "queue.Queue" = queue.Queue()
        self._events: "queue.Queue" = queue.Queue()
        self._t0 = 0.0

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1e3

    def _gen_worker(self) -> None:
        while True:
            block = not self.gen_engine.has_work()
            try:
                while True:
                    message = self._gen_inbox.get(block=block)
                    block = False
                    if message is None:
                        return
                    deliver(message, self.gen_engine, self.ret_engine)
            except queue.Empty:
                pass
            if self.gen_engine.has_work():
                report = self.gen_engine.step()
                time.sleep(report.step_latency_ms / 1e3)
                self._events.put(("generation", report))

    def _ret_worker(self) -> None:
        while True:
            message = self._ret_inbox.get()
            if message is None:
                return
            if isinstance(message, RetBatch):
                report = self.ret_engine.step(message.batch, self.now())
                time.sleep(message.overhead_ms / 1e3)
                self._events.put(("retrieval", (report, message.overhead_ms)))
            else:
                deliver(message, self.gen_engine, self.ret_engine)

    def _route(self) -> None:
        for message in self.core.drain():
            if isinstance(message, (GenSubmit, GenCancel)):
                self._gen_inbox.put(message)
            else:
                self._ret_inbox.put(message)

    def run(self, trace: RequestTrace) -> float:
        timeline: List[Tuple[float, int, str, object]] = []
        for i, record in enumerate(sorted(trace.requests, key=lambda r: (r.arrival_ms, r.request_id))):
            timeline.append((record.arrival_ms, i, "arrival", record))
            if self.core.config.slo_ms is not None:
                timeline.append((record.arrival_ms + self.core.config.slo_ms, len(trace.requests) + i, "timeout", record.request_id))
        heapq.heapify(timeline)

        workers = [threading.Thread(target=self._gen_worker, daemon=True),
                   threading.Thread(target=self._ret_worker, daemon=True)]
        self._t0 = time.monotonic()
        for worker in workers:
            worker.start()
        try:
            while timeline or not self.core.done:
                while timeline and timeline[0][0] <= self.now():
                    _, _, kind, payload = heapq.heappop(timeline)
                    if kind == "arrival":
                        self.core.on_arrival(payload, self.now())
                    else:
                        self.core.on_timeout(payload, self.now())
                    self._route()
                wait = (timeline[0][0] - self.now()) / 1e3 if timeline else None
                try:
                    kind, payload = self._events.get(timeout=max(wait, 0.0) if wait is not None else 1.0)
                except queue.Empty:
                    continue
                if kind == "generation":
                    self.core.on_gen_report(payload, self.now())
                else:
                    report, overhead = payload
                    self.core.on_ret_report(report, overhead, self.now())
                self._route()
        finally:
            self._gen_inbox.put(None)
            self._ret_inbox.put(None)
            for worker in workers:
                worker.join(timeout=5)
        return self.now()


def run_experiment(config: SchedulerConfig, index: IvfIndex, trace: RequestTrace, graphs: Dict[str, RAGraph],
                   gen_latency: GenLatencyModel = GenLatencyModel(), cost: RetrievalCostModel = RetrievalCostModel(),
                   cache_config: Optional[CacheConfig] = None, calibration: Optional[Calibration] = None,
                   tracer: Optional[RunTracer] = None) -> ExperimentReport:
    """Serve a request trace end to end under one strategy and clock"""
    missing = {r.workflow for r in trace.requests} - set(graphs)
    if missing:
        raise ValueError(f"no workflow graph for {sorted(missing)}")
    for name, graph in graphs.items():
        problems = graph.validate()
        if problems:
            raise ValueError(f"workflow {name!r} is invalid: {'; '.join(problems)}")
    if trace.dim != index.dim:
        raise ValueError(f"trace dimension {trace.dim} does not match index dimension {index.dim}")

    tracer = tracer or RunTracer()
    core = SchedulerCore(config, index, graphs, gen_latency, cost, calibration, tracer)
    hedra = config.strategy == Strategy.HEDRA
    cache = None
    if hedra and cache_config is not None and cache_config.enabled:
        cache = TieredCache.for_index(index, cache_config)
    live = config.clock == Clock.LIVE
    ret_engine = RetrievalEngine(index, cost, cache=cache, live=live,
                                 termination_streak=config.termination_streak if hedra and config.approx else None)
    gen_engine = GenerationEngine(gen_latency.model_copy(update={"seed": config.seed}))

    started = time.perf_counter()
    try:
        driver = LiveDriver(core, gen_engine, ret_engine) if live else VirtualDriver(core, gen_engine, ret_engine)
        driver.run(trace)
    finally:
        ret_engine.close()
    wallclock = (time.perf_counter() - started) * 1e3 if live else None
    return core.build_report(config.clock, cache=cache, wallclock_ms=wallclock)


def execute_run(run: RunConfig, tracer: Optional[RunTracer] = None) -> ExperimentReport:
    """Load the artifacts a RunConfig points at and serve its trace"""
    index = IvfIndex.load(run.index_dir)
    trace = RequestTrace.load(run.trace_path)
    graphs = resolve_graphs(trace, run.workflow)
    calibration = Calibration.load(run.calibration_path) if run.calibration_path else None
    return run_experiment(run.scheduler, index, trace, graphs, run.gen_latency, run.retrieval_cost,
                          run.cache, calibration, tracer)
