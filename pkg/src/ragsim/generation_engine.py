"""
Trace-driven generation engine with continuous batching and a calibrated
step-latency model
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .raggraph import SubNode
from .types import GenLatencyModel

logger = logging.getLogger(__name__)


class Checkpoint(BaseModel):
    ratio: float = Field(..., gt=0, le=1, description="Fraction of the output generated")
    embedding: List[float] = Field(..., description="Embedding of the partial output")


class GenerationScript(BaseModel):
    """What one generation stage emits: token count, output and embeddings"""
    total_tokens: int = Field(..., ge=1, description="Decode steps of the stage")
    output_text: str = Field(default="", description="Opaque output token; empty means no output")
    final_embedding: List[float] = Field(..., description="Embedding of the full output")
    prefix_checkpoints: List[Checkpoint] = Field(default_factory=list, description="Partial-output embeddings by prefix ratio")
    prompt_tokens: int = Field(default=0, ge=0, description="Prefill tokens billed on the first step")

    @model_validator(mode="after")
    def _check_checkpoints(self) -> "GenerationScript":
        ratios = [c.ratio for c in self.prefix_checkpoints]
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("checkpoint ratios must be strictly increasing")
        if ratios:
            if ratios[-1] != 1.0:
                raise ValueError("the last checkpoint must have ratio 1.0")
            if self.prefix_checkpoints[-1].embedding != self.final_embedding:
                raise ValueError("the ratio 1.0 checkpoint must carry the final embedding")
        return self

    def final_vector(self) -> np.ndarray:
        return np.asarray(self.final_embedding, dtype=np.float32)


def partial_embedding(script: GenerationScript, ratio: float) -> np.ndarray:
    """Embedding of the latest checkpoint at or before ratio (the first one if none)"""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if not script.prefix_checkpoints:
        raise ValueError("script has no prefix checkpoints")
    chosen = script.prefix_checkpoints[0]
    for checkpoint in script.prefix_checkpoints:
        if checkpoint.ratio <= ratio:
            chosen = checkpoint
        else:
            break
    return np.asarray(chosen.embedding, dtype=np.float32)


@dataclass
class GenSequence:
    request_id: int
    subnode: SubNode
    tokens_done: int
    prefill_tokens: int = 0

    @property
    def end(self) -> int:
        return self.subnode.span[1]


@dataclass
class CompletedSubnode:
    request_id: int
    subnode_id: int
    tokens_done: int


@dataclass
class GenStepReport:
    step_index: int
    batch_size: int
    completed: List[CompletedSubnode] = field(default_factory=list)
    tokens_advanced: int = 0
    step_latency_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "batch_size": self.batch_size,
            "completed": [(c.request_id, c.subnode_id) for c in self.completed],
            "tokens_advanced": self.tokens_advanced,
            "step_latency_ms": self.step_latency_ms,
        }


class GenerationEngine:
    """Step-wise decoder stand-in; one active sub-node per request"""

    def __init__(self, latency: GenLatencyModel):
        self.latency = latency
        self._rng = np.random.default_rng(latency.seed)
        self._active: Dict[int, GenSequence] = {}
        self.step_count = 0

    @property
    def active(self) -> List[Tuple[int, int, int, int]]:
        """(request_id, subnode_id, tokens_done, end) for every active sequence"""
        return [(s.request_id, s.subnode.subnode_id, s.tokens_done, s.end) for s in self._active.values()]

    def has_work(self) -> bool:
        return bool(self._active)

    def submit(self, request_id: int, subnode: SubNode, total_tokens: int, prefill_tokens: int = 0) -> None:
        lo, hi = subnode.span
        if subnode.kind != "generation":
            raise ValueError(f"sub-node {subnode.subnode_id} is not a generation sub-node")
        if not 0 <= lo < hi <= total_tokens:
            raise ValueError(f"span {subnode.span} outside [0, {total_tokens})")
        if request_id in self._active:
            current = self._active[request_id].subnode.subnode_id
            raise ValueError(f"request {request_id} already has active sub-node {current}")
        self._active[request_id] = GenSequence(request_id, subnode, tokens_done=lo, prefill_tokens=prefill_tokens)

    def cancel(self, request_id: int) -> bool:
        removed = self._active.pop(request_id, None)
        if removed is not None:
            logger.debug("cancelled generation of request %d at token %d", request_id, removed.tokens_done)
        return removed is not None

    def expected_step_ms(self, batch_size: int) -> float:
        return self.latency.expected_step_ms(batch_size)

    def step(self) -> GenStepReport:
        """Advance every active sequence by one token"""
        if not self._active:
            return GenStepReport(step_index=self.step_count, batch_size=0)

        batch = len(self._active)
        prefill = sum(s.prefill_tokens for s in self._active.values())
        latency = self.latency.expected_step_ms(batch) + prefill * self.latency.per_seq_ms
        if self.latency.sigma > 0:
            sigma = self.latency.sigma
            latency *= float(self._rng.lognormal(mean=-sigma * sigma / 2, sigma=sigma))

        report = GenStepReport(step_index=self.step_count, batch_size=batch, step_latency_ms=latency)
        for request_id in sorted(self._active):
            seq = self._active[request_id]
            seq.prefill_tokens = 0
            seq.tokens_done += 1
            report.tokens_advanced += 1
            if seq.tokens_done >= seq.end:
                report.completed.append(CompletedSubnode(request_id, seq.subnode.subnode_id, seq.tokens_done))
        for done in report.completed:
            del self._active[done.request_id]
        self.step_count += 1
        return report
