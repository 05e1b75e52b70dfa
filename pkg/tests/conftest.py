from datetime import UTC, datetime

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ragsim.corpus import generate_corpus
from ragsim.logging import RunLogger, RunTracer
from ragsim.report import emit_report
from ragsim.scheduler import execute_run
from ragsim.types import ArrivalSpec, CorpusSpec, QuerySpec, RunConfig, SchedulerConfig, TokenDist, WorkloadSpec
from ragsim.vector_index import IvfIndex, build_from_corpus
from ragsim.workload import generate_workload

settings.register_profile("ragsim", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("ragsim")


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    """Keep run logs out of the real home directory"""
    monkeypatch.setenv("RAGSIM_HOME", str(tmp_path / "home"))
    monkeypatch.delenv("HEDRA_SEED", raising=False)
    return tmp_path / "home"


@pytest.fixture(scope="session")
def corpus_spec():
    return CorpusSpec(n_vectors=800, dim=8, n_topics=16, topic_spread=0.05, n_clusters=16, seed=3)


@pytest.fixture(scope="session")
def small_corpus(corpus_spec):
    return generate_corpus(corpus_spec)


@pytest.fixture(scope="session")
def small_index(small_corpus):
    return build_from_corpus(small_corpus, 16, max_iters=10, seed=0)


def line_index(groups):
    """Index over 2-D points; each group is (centroid x, vectors per cluster)"""
    centroids, ids, vectors = [], [], []
    next_id = 0
    for x, count in groups:
        centroids.append([float(x), 0.0])
        ids.append(np.arange(next_id, next_id + count, dtype=np.int64))
        # spread along y only, so every vector keeps its own centroid as the nearest
        ys = np.linspace(-0.1, 0.1, count, dtype=np.float32) if count > 1 else np.zeros(count, dtype=np.float32)
        vectors.append(np.stack([np.full(count, x, dtype=np.float32), ys], axis=1))
        next_id += count
    return IvfIndex(np.asarray(centroids, dtype=np.float64), ids, vectors)


@pytest.fixture
def pipeline_index():
    """Two far-apart groups of eight clusters: heavy ones near x=0, light ones near x=100"""
    groups = [(i, 1000) for i in range(8)] + [(100 + i, 50) for i in range(8)]
    return line_index(groups)


@pytest.fixture
def make_line_index():
    return line_index


@pytest.fixture(scope="session")
def mixed_spec(corpus_spec):
    return WorkloadSpec(
        corpus=corpus_spec,
        queries=QuerySpec(
            arrival=ArrivalSpec(kind="fixed", offsets_ms=[float(2 * i) for i in range(10)]),
            workflow_mix={"oneshot": 0.2, "hyde": 0.2, "recomp": 0.2, "multistep": 0.2, "irg": 0.2},
            tokens_per_stage=TokenDist(mean=8, std=2, min=2, max=16),
            prompt_tokens=4,
            max_rounds=2,
            seed=5,
        ),
    )


@pytest.fixture(scope="session")
def mixed_trace(mixed_spec):
    return generate_workload(mixed_spec)


@pytest.fixture
def run_config(tmp_path, small_index, mixed_trace):
    index_dir = tmp_path / "index"
    small_index.save(index_dir)
    trace_path = tmp_path / "trace.json"
    mixed_trace.save(trace_path)
    return RunConfig(scheduler=SchedulerConfig(nprobe=8, seed=2), index_dir=str(index_dir), trace_path=str(trace_path))


@pytest.fixture
def run_logger(isolated_home):
    return RunLogger(echo=False)


@pytest.fixture
def logged_run(tmp_path, run_config, run_logger):
    """A hedra run executed, written to disk and logged; returns its RunLog"""
    tracer = RunTracer()
    started = datetime.now(UTC)
    report = execute_run(run_config, tracer)
    report_path, trace_path = emit_report(report, tmp_path / "out" / "report.json", tracer)
    return run_logger.log_run(run_logger.generate_run_id(), run_config.model_dump(mode="json"),
                              report.model_dump(mode="json"), started,
                              report_path=str(report_path), trace_path=str(trace_path))
