"""Query stream generation and ingestion.

Queries arrive pre-batched: each query is one batched inference request
whose service time is driven by its batch size.  Streams are produced by a
Poisson arrival process combined with a configurable batch-size
distribution, or replayed from a single-column CSV trace.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import FormatError, ParameterError, StateError

MAX_BATCH_DEFAULT = 1000

#: Size of the monitoring ring buffer of recently seen batch sizes.
MONITOR_WINDOW_DEFAULT = 10_000


@dataclass
class Query:
    """One batched inference request."""

    id: int
    batch_size: int
    arrival_time: float
    first_queued_time: float


@dataclass(frozen=True)
class PoissonArrivals:
    """Arrival process descriptor: i.i.d. exponential inter-arrival gaps."""

    rate_qps: float
    kind: str = "poisson"

    def __post_init__(self):
        if self.kind != "poisson":
            raise ParameterError(f"unsupported arrival kind: {self.kind!r}")
        if not self.rate_qps > 0:
            raise ParameterError("rate_qps must be > 0")


@dataclass(frozen=True)
class LognormalBatches:
    mu: float
    sigma: float
    kind: str = "lognormal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError("lognormal sigma must be > 0")


@dataclass(frozen=True)
class GaussianBatches:
    mean: float
    std: float
    kind: str = "gaussian"

    def __post_init__(self):
        if not self.std > 0:
            raise ParameterError("gaussian std must be > 0")


@dataclass(frozen=True)
class TraceBatches:
    path: str
    kind: str = "trace"


BatchDistribution = Union[LognormalBatches, GaussianBatches, TraceBatches]


@dataclass(frozen=True)
class WorkloadSpec:
    """Everything needed to generate one deterministic query stream."""

    arrival: PoissonArrivals
    batch_dist: BatchDistribution
    num_queries: int
    seed: int
    max_batch: int = MAX_BATCH_DEFAULT

    def __post_init__(self):
        if self.num_queries < 1:
            raise ParameterError("num_queries must be >= 1")
        if self.max_batch < 1:
            raise ParameterError("max_batch must be >= 1")


def _clamp_batches(raw: np.ndarray, max_batch: int) -> np.ndarray:
    # Clamp instead of rejection sampling so the sample count stays exact.
    return np.clip(np.rint(raw), 1, max_batch).astype(np.int64)


def generate_stream(spec: WorkloadSpec) -> list[Query]:
    """Generate ``spec.num_queries`` queries; bit-identical for a fixed seed.

    Inter-arrival gaps are exponential with mean ``1/rate_qps``; batch sizes
    are drawn from ``spec.batch_dist``, rounded to integers and clamped to
    ``[1, max_batch]``.  Draw order is arrivals first, then batches, so the
    stream is reproducible from the seed alone.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_queries
    gaps = rng.exponential(1.0 / spec.arrival.rate_qps, size=n)
    arrivals = np.cumsum(gaps)

    dist = spec.batch_dist
    if isinstance(dist, LognormalBatches):
        batches = _clamp_batches(rng.lognormal(dist.mu, dist.sigma, size=n), spec.max_batch)
    elif isinstance(dist, GaussianBatches):
        batches = _clamp_batches(rng.normal(dist.mean, dist.std, size=n), spec.max_batch)
    elif isinstance(dist, TraceBatches):
        trace = load_trace(dist.path, max_batch=spec.max_batch)
        # Replay cyclically when the trace is shorter than the stream.
        batches = np.resize(np.asarray(trace, dtype=np.int64), n)
    else:
        raise ParameterError(f"unsupported batch distribution: {dist!r}")

    return [
        Query(id=i, batch_size=int(batches[i]), arrival_time=float(arrivals[i]),
              first_queued_time=float(arrivals[i]))
        for i in range(n)
    ]


def load_trace(path: str, max_batch: int = MAX_BATCH_DEFAULT) -> list[int]:
    """Load batch sizes from a one-column CSV, clamping each to [1, max_batch].

    An optional single header cell ``batch_size`` is skipped.  Raises
    :class:`FormatError` with the offending line number for non-integer or
    non-positive entries, and for an empty file.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read trace file {path!r}: {exc}") from exc

    batches: list[int] = []
    with fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 1:
                raise FormatError("expected a single batch_size column", line=line_no)
            cell = row[0].strip()
            if line_no == 1 and cell == "batch_size":
                continue
            try:
                value = int(cell)
            except ValueError:
                raise FormatError(f"not an integer batch size: {cell!r}", line=line_no) from None
            if value <= 0:
                raise FormatError(f"batch size must be positive, got {value}", line=line_no)
            batches.append(min(value, max_batch))
    if not batches:
        raise FormatError(f"trace file {path!r} contains no batch sizes")
    return batches


def empirical_fraction_below(window: Sequence[int] | np.ndarray, s: float) -> float:
    """Fraction of batch sizes in ``window`` strictly below ``s``."""
    arr = np.asarray(window)
    if arr.size == 0:
        raise StateError("empty monitoring window")
    return float(np.count_nonzero(arr < s)) / arr.size


@dataclass
class BatchWindow:
    """Ring buffer of the most recent batch sizes seen by the system."""

    maxlen: int = MONITOR_WINDOW_DEFAULT
    _buf: deque = field(init=False, repr=False)

    def __post_init__(self):
        self._buf = deque(maxlen=self.maxlen)

    def push(self, batch_size: int) -> None:
        self._buf.append(batch_size)

    def extend(self, batch_sizes: Iterable[int]) -> None:
        self._buf.extend(batch_sizes)

    def __len__(self) -> int:
        return len(self._buf)

    def as_array(self) -> np.ndarray:
        return np.asarray(self._buf, dtype=np.int64)

    def fraction_below(self, s: float) -> float:
        return empirical_fraction_below(self.as_array(), s)
