"""
HVEC corpus files and the synthetic Gaussian-mixture corpus generator
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .types import CorpusSpec, Metric

MAGIC = b"HVEC"
VERSION = 1
# magic, version u32, dim u32, count u64, metric u8
_HEADER = struct.Struct("<4sIIQB")
_METRIC_CODES = {Metric.L2: 0, Metric.COSINE: 1}
_CODE_METRICS = {v: k for k, v in _METRIC_CODES.items()}


@dataclass
class Corpus:
    vectors: np.ndarray  # (N, D) float32
    doc_ids: np.ndarray  # (N,) int64
    metric: Metric = Metric.L2

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def write_hvec(path: Path, vectors: np.ndarray, doc_ids: Optional[np.ndarray], metric: Metric = Metric.L2) -> None:
    """Write a little-endian HVEC file; doc ids are omitted for centroid files"""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {vectors.shape}")
    count, dim = vectors.shape
    if doc_ids is not None and len(doc_ids) != count:
        raise ValueError(f"{len(doc_ids)} doc ids for {count} vectors")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, count, _METRIC_CODES[Metric(metric)]))
        f.write(vectors.tobytes())
        if doc_ids is not None:
            f.write(np.ascontiguousarray(doc_ids, dtype="<u8").tobytes())


def read_hvec(path: Path, with_ids: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray], Metric]:
    """Read an HVEC file written by write_hvec"""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, dim, count, metric_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if metric_code not in _CODE_METRICS:
        raise ValueError(f"{path}: unknown metric code {metric_code}")

    offset = _HEADER.size
    n_floats = count * dim
    expected = offset + n_floats * 4 + (count * 8 if with_ids else 0)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")

    vectors = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset).reshape(count, dim).astype(np.float32)
    doc_ids = None
    if with_ids:
        doc_ids = np.frombuffer(raw, dtype="<u8", count=count, offset=offset + n_floats * 4).astype(np.int64)
    return vectors, doc_ids, _CODE_METRICS[metric_code]


def write_corpus(path: Path, corpus: Corpus) -> None:
    write_hvec(path, corpus.vectors, corpus.doc_ids, corpus.metric)


def read_corpus(path: Path) -> Corpus:
    vectors, doc_ids, metric = read_hvec(path, with_ids=True)
    return Corpus(vectors=vectors, doc_ids=doc_ids, metric=metric)


def topic_centers(spec: CorpusSpec) -> np.ndarray:
    """Unit-sphere topic centers; shared by the corpus and workload generators"""
    rng = np.random.default_rng([spec.seed, 0])
    centers = rng.standard_normal((spec.n_topics, spec.dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return centers / norms


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Gaussian mixture: n_topics centers with isotropic per-topic spread"""
    centers = topic_centers(spec)
    rng = np.random.default_rng([spec.seed, 1])
    topics = rng.integers(0, spec.n_topics, size=spec.n_vectors)
    noise = rng.standard_normal((spec.n_vectors, spec.dim)) * spec.topic_spread
    vectors = (centers[topics] + noise).astype(np.float32)
    return Corpus(
        vectors=vectors,
        doc_ids=np.arange(spec.n_vectors, dtype=np.int64),
        metric=spec.metric,
    )
