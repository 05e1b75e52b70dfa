"""
Experiment report schema and the files a run leaves behind
"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .logging import RunTracer, TraceEvent, busy_time_by_worker, read_trace, trace_frame

VOLATILE_FIELDS = ("wallclock_ms",)


def percentile(values: Sequence[float], q: float) -> float:
    if not len(values):
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


class RequestOutcome(BaseModel):
    request_id: int
    workflow: str
    arrival_ms: float
    finish_ms: Optional[float] = None
    latency_ms: Optional[float] = None
    status: str = Field(..., description="done, failed or running")
    error: Optional[str] = None
    bindings: Dict[str, Dict[str, Any]] = Field(default_factory=dict, description="Final variable bindings")


class SpeculationStats(BaseModel):
    gen_launched: int = 0
    ret_launched: int = 0
    valid: int = 0
    mismatch: int = 0
    rollbacks: int = 0
    accuracy: float = Field(default=0.0, description="valid / (valid + mismatch)")


class CacheStats(BaseModel):
    enabled: bool = False
    capacity_gc: int = 0
    hits: int = 0
    misses: int = 0
    hit_rate: float = 0.0
    swaps_in: int = 0
    swaps_out: int = 0


class LaneStats(BaseModel):
    slow_ms: float = 0.0
    fast_ms: float = 0.0
    slow_clusters: int = 0
    fast_clusters: int = 0
    slow_utilization: float = 0.0
    fast_utilization: float = 0.0


class IdleStats(BaseModel):
    generation: float = Field(default=0.0, description="Idle fraction of the generation worker over the makespan")
    retrieval: float = Field(default=0.0, description="Idle fraction of the retrieval worker over the makespan")


class StageStats(BaseModel):
    count: int = 0
    mean_ms: float = 0.0
    total_ms: float = 0.0


class ExperimentReport(BaseModel):
    """Metrics of one run"""
    strategy: str
    clock: str
    seed: int = 0
    n_requests: int = 0
    completed: int = 0
    failed: int = 0
    requests: List[RequestOutcome] = Field(default_factory=list)
    mean_latency_ms: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p95_ms: float = 0.0
    latency_p99_ms: float = 0.0
    throughput_rps: float = 0.0
    makespan_ms: float = 0.0
    speculation: SpeculationStats = Field(default_factory=SpeculationStats)
    cache: CacheStats = Field(default_factory=CacheStats)
    lanes: LaneStats = Field(default_factory=LaneStats)
    idle: IdleStats = Field(default_factory=IdleStats)
    stages: Dict[str, StageStats] = Field(default_factory=dict)
    substages: int = Field(default=0, description="Retrieval sub-stages dispatched")
    seeded_searches: int = 0
    mean_clusters_searched: float = 0.0
    budget_ms: float = Field(default=0.0, description="Last sub-stage budget used")
    wallclock_ms: Optional[float] = Field(default=None, description="Live clock only")

    def bindings(self) -> Dict[int, Dict[str, Dict[str, Any]]]:
        return {r.request_id: r.bindings for r in self.requests}

    def headline(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "completed": self.completed,
            "failed": self.failed,
            "makespan_ms": round(self.makespan_ms, 3),
            "latency_p50_ms": round(self.latency_p50_ms, 3),
            "latency_p99_ms": round(self.latency_p99_ms, 3),
            "throughput_rps": round(self.throughput_rps, 3),
            "speculation_accuracy": round(self.speculation.accuracy, 3),
            "cache_hit_rate": round(self.cache.hit_rate, 3),
        }


def emit_report(report: ExperimentReport, path: Union[str, Path],
                tracer: Optional[RunTracer] = None) -> Tuple[Path, Optional[Path]]:
    """Write <path> as JSON and, with a tracer, the event trace next to it as .trace.jsonl"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    trace_path = None
    if tracer is not None:
        trace_path = tracer.write_jsonl(path.with_suffix(".trace.jsonl"))
    return path, trace_path


def load_report(path: Union[str, Path]) -> ExperimentReport:
    return ExperimentReport.model_validate_json(Path(path).read_text())


def comparable(report: ExperimentReport) -> Dict[str, Any]:
    """Report contents without fields that differ between identical runs"""
    data = report.model_dump(mode="json")
    for name in VOLATILE_FIELDS:
        data.pop(name, None)
    return data


def summarize_trace(path: Union[str, Path]) -> Dict[str, Any]:
    """Per-worker busy time and per-event counts of a JSON-lines trace"""
    events: List[TraceEvent] = read_trace(path)
    frame = trace_frame(events)
    if frame.empty:
        return {"events": 0, "span_ms": 0.0, "busy_ms": {}, "event_counts": {}}
    span = float((frame["time_ms"] + frame["duration_ms"]).max() - frame["time_ms"].min())
    counts = frame.groupby("event").size()
    return {
        "events": int(len(frame)),
        "span_ms": span,
        "busy_ms": busy_time_by_worker(events),
        "event_counts": {str(k): int(v) for k, v in counts.items()},
    }
