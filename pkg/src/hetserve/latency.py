"""Per-instance-type latency models.

Ground truth is affine in batch size (service latency correlates almost
perfectly with batch size for batched inference, so an affine curve is the
simplest consistent model).  A :class:`LatencyPredictor` learns latencies
online as a per-batch-size lookup table of running means with an affine
least-squares fallback for unseen batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError, StateError
from .workload import MAX_BATCH_DEFAULT

ROLE_BASE = "base"
ROLE_AUXILIARY = "auxiliary"

#: Lower bound on any modelled latency, in milliseconds.
MIN_LATENCY_MS = 0.01


@dataclass(frozen=True)
class LatencyCurve:
    """Affine latency model: ``intercept_ms + slope_ms_per_request * batch``."""

    intercept_ms: float
    slope_ms_per_request: float

    def __post_init__(self):
        if self.intercept_ms < 0:
            raise ParameterError("intercept_ms must be >= 0")
        if not self.slope_ms_per_request > 0:
            raise ParameterError("slope_ms_per_request must be > 0")

    def latency_ms(self, batch):
        return self.intercept_ms + self.slope_ms_per_request * batch


@dataclass(frozen=True)
class InstanceTypeSpec:
    """A purchasable hardware class with its price and ground-truth curve."""

    type_id: int
    name: str
    price_per_hour: float
    curve: LatencyCurve
    role: str = ROLE_AUXILIARY

    def __post_init__(self):
        if self.role not in (ROLE_BASE, ROLE_AUXILIARY):
            raise ParameterError(f"unknown role {self.role!r}")
        if not self.price_per_hour > 0:
            raise ParameterError("price_per_hour must be > 0")

    @property
    def is_base(self) -> bool:
        return self.role == ROLE_BASE


@dataclass(frozen=True)
class QoSSpec:
    """Tail-latency target with a dispatch-side guard band.

    Dispatch decisions compare against ``xi * t_qos_ms`` so completions
    predicted to land within the guard band are already treated as
    violations; the run verdict itself uses the unscaled target.
    """

    t_qos_ms: float
    xi: float = 0.98
    percentile: float = 99.0

    def __post_init__(self):
        if not self.t_qos_ms > 0:
            raise ParameterError("t_qos_ms must be > 0")
        if not 0 < self.xi <= 1:
            raise ParameterError("xi must be in (0, 1]")
        if not 0 < self.percentile < 100:
            raise ParameterError("percentile must be in (0, 100)")

    @property
    def effective_deadline_ms(self) -> float:
        return self.xi * self.t_qos_ms


def true_latency(
    spec: InstanceTypeSpec,
    batch: int,
    noise_std_fraction: float | None = None,
    rng: np.random.Generator | None = None,
    max_batch: int = MAX_BATCH_DEFAULT,
) -> float:
    """Ground-truth latency in ms; optionally with multiplicative-scale noise.

    Noise is zero-mean Gaussian with standard deviation
    ``noise_std_fraction * mean``; results are floored at ``MIN_LATENCY_MS``.
    """
    if not 1 <= batch <= max_batch:
        raise ParameterError(f"batch {batch} outside [1, {max_batch}]")
    value = spec.curve.latency_ms(batch)
    if noise_std_fraction:
        if rng is None:
            raise ParameterError("noise requires an rng")
        value += rng.normal(0.0, noise_std_fraction * value)
    return max(value, MIN_LATENCY_MS)


class LatencyPredictor:
    """Online per-type latency estimates: lookup table plus affine fallback.

    Table entries are running means per (type, batch); once a type has two
    or more distinct observed batch sizes the fallback line is the
    observation-count-weighted least-squares fit through the table.  Types
    may carry a prior affine model used until enough data accumulates.
    Single-writer: the simulation kernel owns updates.
    """

    def __init__(self, max_batch: int = MAX_BATCH_DEFAULT):
        self.max_batch = max_batch
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, np.ndarray] = {}
        self._priors: dict[int, tuple[float, float]] = {}
        # Per-type running regression moments: n, mean_x, mean_y, M2x, Cxy,
        # distinct batch count.  Welford-style so the fit is O(1) per update.
        self._moments: dict[int, list[float]] = {}

    def set_prior(self, type_id: int, intercept_ms: float, slope_ms_per_request: float) -> None:
        self._priors[type_id] = (intercept_ms, slope_ms_per_request)

    def _ensure(self, type_id: int) -> None:
        if type_id not in self._sums:
            self._sums[type_id] = np.zeros(self.max_batch + 1)
            self._counts[type_id] = np.zeros(self.max_batch + 1, dtype=np.int64)
            self._moments[type_id] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]

    def observe(self, type_id: int, batch: int, measured_ms: float) -> None:
        if not measured_ms > 0:
            raise ParameterError("measured_ms must be > 0")
        if not 1 <= batch <= self.max_batch:
            raise ParameterError(f"batch {batch} outside [1, {self.max_batch}]")
        self._ensure(type_id)
        if self._counts[type_id][batch] == 0:
            self._moments[type_id][5] += 1
        self._sums[type_id][batch] += measured_ms
        self._counts[type_id][batch] += 1
        m = self._moments[type_id]
        m[0] += 1
        dx = batch - m[1]
        m[1] += dx / m[0]
        m[3] += dx * (batch - m[1])
        dy = measured_ms - m[2]
        m[2] += dy / m[0]
        m[4] += dx * (measured_ms - m[2])

    def observation_count(self, type_id: int) -> int:
        if type_id not in self._moments:
            return 0
        return int(self._moments[type_id][0])

    def fallback_line(self, type_id: int) -> tuple[float, float]:
        """(intercept, slope) used for batches missing from the table.

        Least-squares over all raw observations once two distinct batch
        sizes were seen (identical to a count-weighted fit through the table
        means); before that, the configured prior, or a flat line through
        the single observed mean.
        """
        m = self._moments.get(type_id)
        if m is not None and m[5] >= 2 and m[3] > 0:
            slope = m[4] / m[3]
            return (m[2] - slope * m[1], slope)
        if type_id in self._priors:
            return self._priors[type_id]
        if m is not None and m[5] == 1:
            seen = np.nonzero(self._counts[type_id])[0]
            b = int(seen[0])
            return (self._sums[type_id][b] / self._counts[type_id][b], 0.0)
        raise StateError(f"no observations and no prior for type {type_id}")

    def predict(self, type_id: int, batch: int) -> float:
        """Exact table value when seen before, else the fallback line."""
        counts = self._counts.get(type_id)
        if counts is not None and 1 <= batch <= self.max_batch and counts[batch] > 0:
            return float(self._sums[type_id][batch] / counts[batch])
        intercept, slope = self.fallback_line(type_id)
        return max(intercept + slope * batch, 0.0)

    def predict_batches(self, type_id: int, batches: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`predict` over an integer batch-size array."""
        intercept, slope = self.fallback_line(type_id)
        out = np.maximum(intercept + slope * batches.astype(float), 0.0)
        counts = self._counts.get(type_id)
        if counts is not None:
            hits = counts[batches] > 0
            if hits.any():
                idx = batches[hits]
                out[hits] = self._sums[type_id][idx] / counts[idx]
        return out


def heterogeneity_coefficients(
    pool_types: list[InstanceTypeSpec], max_batch: int = MAX_BATCH_DEFAULT
) -> dict[int, float]:
    """Relative worth of each type's time versus the base type, in (0, 1].

    Derived from the latency ratio at the largest servable batch size; the
    base type is the normalization point at 1.0 and any type faster than
    base at that size is clamped to 1.0.
    """
    bases = [t for t in pool_types if t.is_base]
    if len(bases) != 1:
        raise ConfigurationError(f"pool must have exactly one base type, got {len(bases)}")
    base_ms = bases[0].curve.latency_ms(max_batch)
    if not base_ms > 0:
        raise ConfigurationError("base latency at max batch must be positive")
    coeffs: dict[int, float] = {}
    for t in pool_types:
        own_ms = t.curve.latency_ms(max_batch)
        if not own_ms > 0:
            raise ConfigurationError(f"type {t.type_id} latency at max batch must be positive")
        coeffs[t.type_id] = min(1.0, base_ms / own_ms)
    return coeffs


def qos_batch_limit(
    spec: InstanceTypeSpec, qos: QoSSpec, max_batch: int = MAX_BATCH_DEFAULT
) -> int:
    """Largest batch size the type serves within the guarded deadline, else 0."""
    deadline = qos.effective_deadline_ms
    curve = spec.curve
    if curve.latency_ms(1) > deadline:
        return 0
    # Closed-form candidate, then integer refinement to dodge float edges.
    s = int((deadline - curve.intercept_ms) / curve.slope_ms_per_request)
    s = max(1, min(s, max_batch))
    while s < max_batch and curve.latency_ms(s + 1) <= deadline:
        s += 1
    while s > 1 and curve.latency_ms(s) > deadline:
        s -= 1
    return s
