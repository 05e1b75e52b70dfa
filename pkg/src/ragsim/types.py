"""
Configuration models for ragsim
"""
import os
import tomllib
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

SEED_ENV_VAR = "HEDRA_SEED"


def seed_override() -> Optional[int]:
    """Return the seed forced through the environment, if any"""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


class Metric(str, Enum):
    L2 = "l2"
    COSINE = "cosine"


class Strategy(str, Enum):
    COARSE = "coarse"
    NAIVE = "naive"
    HEDRA = "hedra"


class Clock(str, Enum):
    LIVE = "live"
    VIRTUAL = "virtual"


class GenLatencyModel(BaseModel):
    """Per-step latency of the generation engine"""
    base_ms: float = Field(default=2.0, ge=0, description="Fixed cost of one decode step")
    per_seq_ms: float = Field(default=0.2, ge=0, description="Additional cost per active sequence")
    sigma: float = Field(default=0.3, ge=0, description="Lognormal jitter sigma (0 disables jitter)")
    seed: int = Field(default=0, description="Seed of the jitter stream")

    def expected_step_ms(self, batch_size: int) -> float:
        return self.base_ms + self.per_seq_ms * batch_size


class RetrievalCostModel(BaseModel):
    """Modeled cost of scanning index clusters"""
    per_vector_ns: float = Field(default=10.0, gt=0, description="Slow-lane cost per scanned vector")
    fast_speedup: float = Field(default=8.0, ge=1, description="Fast-lane speedup over the slow lane")
    fixed_call_us: float = Field(default=50.0, ge=0, description="Fixed cost of one search call")
    per_cluster_us: float = Field(default=2.0, ge=0, description="Bookkeeping cost per scanned cluster")


class CacheConfig(BaseModel):
    """Fast-tier partial index cache"""
    enabled: bool = Field(default=True, description="Whether the fast tier is used at all")
    capacity_gc: Optional[int] = Field(default=None, ge=0, description="Clusters kept resident; derived from capacity_fraction when unset")
    capacity_fraction: float = Field(default=0.2, ge=0, le=1, description="Resident fraction of all clusters")
    update_interval: int = Field(default=50, ge=1, description="Sub-stages between residency updates")
    min_fast_clusters: int = Field(default=2, ge=1, description="Fast lane engaged only with this many resident clusters in a sub-stage")
    transfer_gbps: float = Field(default=16.0, gt=0, description="Modeled host-to-device bandwidth")
    decay: float = Field(default=0.5, ge=0, le=1, description="Frequency counter decay applied at each update")

    def resolve_capacity(self, n_clusters: int) -> int:
        if self.capacity_gc is not None:
            return min(self.capacity_gc, n_clusters)
        return int(n_clusters * self.capacity_fraction)


class SchedulerConfig(BaseModel):
    """Serving loop configuration"""
    strategy: Strategy = Field(default=Strategy.HEDRA, description="Pipeline strategy")
    clock: Clock = Field(default=Clock.VIRTUAL, description="Time source")
    beta_ms: float = Field(default=1.0, gt=0, description="Scheduling overhead per retrieval sub-stage")
    tau: float = Field(default=0.8, gt=0, le=1, description="Speculation trigger threshold on T_curr/T_max")
    mb_override: Optional[float] = Field(default=None, gt=0, description="Fixed sub-stage time budget in ms")
    min_budget_ms: float = Field(default=0.1, gt=0, description="Lower clamp of the sub-stage budget")
    printed_sign: bool = Field(default=False, description="Use the additive overhead term when solving the budget")
    initial_t_retrieval_ms: float = Field(default=20.0, gt=0, description="Retrieval stage latency assumed before any measurement")
    ewma_alpha: float = Field(default=0.2, gt=0, le=1, description="Smoothing of the measured retrieval stage latency")
    nprobe: int = Field(default=32, ge=1, description="Clusters visited per retrieval")
    topk: Optional[int] = Field(default=None, ge=1, description="Override of every retrieval node's topk")
    k_cache: int = Field(default=20, ge=1, description="Extended top-k kept in the locality cache")
    delta: Optional[float] = Field(default=None, gt=0, description="Locality probe radius; derived from the index when unset")
    speculation: bool = Field(default=True, description="Enable speculative generation and retrieval")
    approx: bool = Field(default=False, description="Enable early termination (sacrifices exactness)")
    termination_streak: int = Field(default=4, ge=1, description="Unchanged clusters before early termination")
    validation_mode: Literal["strict", "recall"] = Field(default="strict", description="Speculation validation rule")
    recall_threshold: float = Field(default=1.0, gt=0, le=1, description="Minimum overlap accepted in recall mode")
    slo_ms: Optional[float] = Field(default=None, gt=0, description="Per-request latency bound")
    seed: int = Field(default=0, description="Run seed")


class LinearThroughputModel(BaseModel):
    """T_curr = a * requests + b * prefill_tokens, capped by the measured peak t_max"""
    a: float = Field(..., ge=0, description="Throughput contribution per active request")
    b: float = Field(default=0.0, ge=0, description="Throughput contribution per prefill token")
    t_max: float = Field(..., gt=0, description="Peak throughput")


class Calibration(BaseModel):
    """Calibration constants produced by `ragsim bench`"""
    gen: LinearThroughputModel = Field(
        default_factory=lambda: LinearThroughputModel(a=0.25, b=0.0005, t_max=4.0),
        description="Generation-side throughput model",
    )
    ret: LinearThroughputModel = Field(
        default_factory=lambda: LinearThroughputModel(a=1.0, b=0.0, t_max=8.0),
        description="Retrieval-side throughput model",
    )
    per_vector_ns: Optional[float] = Field(default=None, gt=0, description="Measured slow-lane scan cost")
    beta_ms: Optional[float] = Field(default=None, gt=0, description="Measured scheduling overhead")

    @classmethod
    def load(cls, path: str) -> "Calibration":
        return cls.model_validate_json(Path(path).read_text())


class CorpusSpec(BaseModel):
    """Synthetic Gaussian-mixture corpus"""
    n_vectors: int = Field(default=100_000, ge=1, description="Corpus size N")
    dim: int = Field(default=64, ge=1, description="Embedding dimension D")
    n_topics: int = Field(default=256, ge=1, description="Mixture components")
    topic_spread: float = Field(default=0.05, ge=0, description="Per-dimension standard deviation around a topic center")
    n_clusters: int = Field(default=256, ge=1, description="IVF clusters trained by build-index")
    metric: Metric = Field(default=Metric.L2, description="Index metric")
    seed: int = Field(default=0, description="Corpus seed")


class ArrivalSpec(BaseModel):
    kind: Literal["poisson", "fixed"] = Field(default="poisson", description="Arrival process")
    rate_per_s: float = Field(default=20.0, gt=0, description="Poisson arrival rate")
    horizon_ms: float = Field(default=10_000.0, gt=0, description="Poisson arrival horizon")
    offsets_ms: List[float] = Field(default_factory=list, description="Explicit arrival offsets for kind=fixed")

    @model_validator(mode="after")
    def _check_offsets(self) -> "ArrivalSpec":
        if self.kind == "fixed" and not self.offsets_ms:
            raise ValueError("fixed arrivals need at least one offset")
        if any(o < 0 for o in self.offsets_ms):
            raise ValueError("arrival offsets must be non-negative")
        return self


class TokenDist(BaseModel):
    mean: float = Field(default=64.0, gt=0)
    std: float = Field(default=16.0, ge=0)
    min: int = Field(default=8, ge=1)
    max: int = Field(default=256, ge=1)


class QuerySpec(BaseModel):
    """Request population drawn over the corpus topics"""
    arrival: ArrivalSpec = Field(default_factory=ArrivalSpec)
    workflow_mix: Dict[str, float] = Field(default_factory=lambda: {"oneshot": 1.0}, description="Template name to weight")
    zipf_s: float = Field(default=1.0, ge=0, description="Zipf exponent of the topic popularity")
    query_noise: float = Field(default=0.05, ge=0, description="Per-dimension noise of the initial query around its topic")
    drift_delta: float = Field(default=0.1, ge=0, description="Offset between successive queries of one request")
    checkpoint_ratios: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    checkpoint_spread: float = Field(default=0.3, ge=0, description="Distance of the earliest partial embedding from the final one")
    tokens_per_stage: TokenDist = Field(default_factory=TokenDist)
    prompt_tokens: int = Field(default=128, ge=0, description="Prefill tokens per generation stage")
    max_rounds: int = Field(default=3, ge=1, description="Upper bound of multistep rounds")
    seed: int = Field(default=0, description="Workload seed")

    @field_validator("workflow_mix")
    @classmethod
    def _weights_sum_to_one(cls, mix: Dict[str, float]) -> Dict[str, float]:
        if not mix:
            raise ValueError("workflow_mix must not be empty")
        if any(w < 0 for w in mix.values()):
            raise ValueError("workflow weights must be non-negative")
        if abs(sum(mix.values()) - 1.0) > 1e-6:
            raise ValueError(f"workflow weights must sum to 1, got {sum(mix.values())}")
        return mix

    @field_validator("checkpoint_ratios")
    @classmethod
    def _ratios_end_at_one(cls, ratios: List[float]) -> List[float]:
        if not ratios or ratios[-1] != 1.0:
            raise ValueError("checkpoint ratios must end at 1.0")
        if any(b <= a for a, b in zip(ratios, ratios[1:])) or ratios[0] <= 0:
            raise ValueError("checkpoint ratios must be strictly increasing in (0, 1]")
        return ratios


class WorkloadSpec(BaseModel):
    """Corpus plus request population, mirrored by the TOML config file"""
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    queries: QuerySpec = Field(default_factory=QuerySpec)

    @classmethod
    def from_toml(cls, path: str) -> "WorkloadSpec":
        with open(path, "rb") as f:
            return cls.model_validate(tomllib.load(f)).with_seed_override()

    def with_seed_override(self) -> "WorkloadSpec":
        seed = seed_override()
        if seed is None:
            return self
        return self.model_copy(update={
            "corpus": self.corpus.model_copy(update={"seed": seed}),
            "queries": self.queries.model_copy(update={"seed": seed}),
        })


class RunConfig(BaseModel):
    """Everything needed to re-execute one `ragsim run`"""
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    gen_latency: GenLatencyModel = Field(default_factory=GenLatencyModel)
    retrieval_cost: RetrievalCostModel = Field(default_factory=RetrievalCostModel)
    cache: CacheConfig = Field(default_factory=CacheConfig)
    index_dir: str = Field(..., description="Directory written by build-index")
    trace_path: str = Field(..., description="Request trace written by gen-workload")
    workflow: Optional[str] = Field(default=None, description="Template name or workflow file forced on every request")
    calibration_path: Optional[str] = Field(default=None, description="Calibration JSON from bench")

    def with_seed_override(self) -> "RunConfig":
        seed = seed_override()
        if seed is None:
            return self
        return self.model_copy(update={
            "scheduler": self.scheduler.model_copy(update={"seed": seed}),
            "gen_latency": self.gen_latency.model_copy(update={"seed": seed}),
        })
