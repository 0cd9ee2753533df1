"""Deterministic discrete-event simulation of a heterogeneous instance pool.

A run processes a pre-generated query stream under a pluggable dispatch
policy.  Two event kinds exist: query arrivals and query completions;
completions sort before arrivals at equal timestamps so freed instances are
visible to the arrival's dispatch round.  The policy is invoked on every
arrival and on every completion that leaves the central queue non-empty.
Commitments are final: once a query is assigned to an instance it queues
there and is never re-matched.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from heapq import heappop, heappush
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, ParameterError, SimulationInvariantError, StateError
from .latency import (
    InstanceTypeSpec,
    LatencyPredictor,
    QoSSpec,
    heterogeneity_coefficients,
    true_latency,
)
from .workload import MAX_BATCH_DEFAULT, PoissonArrivals, Query, WorkloadSpec, generate_stream

_MASK64 = (1 << 64) - 1


def stable_seed(*parts: int) -> int:
    """Order-sensitive 63-bit mix of integers; stable across runs and platforms."""
    x = 0x9E3779B97F4A7C15
    for p in parts:
        x = ((x ^ (int(p) & _MASK64)) * 0xBF58476D1CE4E5B9) & _MASK64
        x ^= x >> 27
        x = (x * 0x94D049BB133111EB) & _MASK64
        x ^= x >> 31
    return x >> 1


@dataclass(frozen=True)
class HeterogeneousConfig:
    """Instance counts per type; the point evaluated by planning and search."""

    type_ids: tuple[int, ...]
    counts: tuple[int, ...]
    cost_per_hour: float

    def count_for(self, type_id: int) -> int:
        try:
            return self.counts[self.type_ids.index(type_id)]
        except ValueError:
            return 0

    @property
    def total_instances(self) -> int:
        return sum(self.counts)


def make_config(catalog: Sequence[InstanceTypeSpec], counts: Sequence[int]) -> HeterogeneousConfig:
    if len(counts) != len(catalog):
        raise ParameterError(f"expected {len(catalog)} counts, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ParameterError("instance counts must be non-negative")
    cost = sum(c * t.price_per_hour for c, t in zip(counts, catalog))
    return HeterogeneousConfig(
        type_ids=tuple(t.type_id for t in catalog), counts=tuple(int(c) for c in counts),
        cost_per_hour=float(cost),
    )


def base_instance_count(config: HeterogeneousConfig, catalog: Sequence[InstanceTypeSpec]) -> int:
    by_id = {t.type_id: t for t in catalog}
    return sum(c for tid, c in zip(config.type_ids, config.counts) if by_id[tid].is_base)


class InstanceState:
    """Runtime state of one instance: the running query plus committed backlog.

    ``estimated_remaining_ms`` is the controller's view: predicted remaining
    time of the running query plus predicted latencies of committed queries,
    using predictions snapshotted at commit time.
    """

    __slots__ = ("index", "spec", "running_query", "committed",
                 "_pred_finish_s", "_queue_pred_ms", "_running_true_ms")

    def __init__(self, index: int, spec: InstanceTypeSpec):
        self.index = index
        self.spec = spec
        self.running_query: Optional[Query] = None
        self.committed: deque = deque()  # (query, predicted_ms) not yet started
        self._pred_finish_s = 0.0
        self._queue_pred_ms = 0.0
        self._running_true_ms = 0.0

    @property
    def type_id(self) -> int:
        return self.spec.type_id

    @property
    def is_idle(self) -> bool:
        return self.running_query is None

    def estimated_remaining_ms(self, now: float) -> float:
        if self.running_query is None:
            return 0.0
        return max(0.0, (self._pred_finish_s - now) * 1000.0) + self._queue_pred_ms


@dataclass(frozen=True)
class Commitment:
    """A dispatch decision: place ``query`` on instance ``instance_index``.

    ``forced`` marks the starvation-escape path where a query past rescue is
    pushed to its minimum-completion-time instance; ``penalized`` records
    whether the chosen pairing breaks the guarded deadline.
    """

    query: Query
    instance_index: int
    forced: bool = False
    penalized: bool = False


@dataclass(frozen=True)
class PolicyContext:
    """Snapshot handed to a dispatch policy on each invocation."""

    now: float
    queue: tuple[Query, ...]
    instances: tuple[InstanceState, ...]
    busy_ms: np.ndarray          # estimated remaining ms per instance
    type_ids: tuple[int, ...]    # per instance
    is_base: np.ndarray          # per instance
    coeffs: dict[int, float]     # per type heterogeneity coefficient
    coeff_by_instance: np.ndarray
    predictor: LatencyPredictor
    qos: QoSSpec
    max_batch: int


class DispatchPolicy(Protocol):
    name: str

    def dispatch(self, ctx: PolicyContext) -> list[Commitment]: ...


@dataclass(frozen=True)
class LatencySettings:
    """Execution-model knobs for a run."""

    noise_std_fraction: Optional[float] = None
    predictor_prior: str = "true_curve"   # "true_curve" | "none"
    controller_overhead_ms: float = 0.0
    max_batch: int = MAX_BATCH_DEFAULT


@dataclass(frozen=True)
class SimReport:
    """Outcome of one simulated run."""

    offered_rate_qps: float
    completed: int
    qos_violations: int
    p99_latency_ms: float
    achieved_goodput_qps: float
    utilization: tuple[tuple[int, float], ...]  # (type_id, busy fraction)
    seed: int
    policy: str
    makespan_s: float

    def utilization_for(self, type_id: int) -> float:
        for tid, u in self.utilization:
            if tid == type_id:
                return u
        return 0.0


def run(
    config: HeterogeneousConfig,
    catalog: Sequence[InstanceTypeSpec],
    queries: Sequence[Query],
    policy: DispatchPolicy,
    qos: QoSSpec,
    settings: LatencySettings = LatencySettings(),
    seed: int = 0,
    offered_rate_qps: Optional[float] = None,
    after_dispatch: Optional[Callable[[PolicyContext, list[Commitment]], None]] = None,
) -> SimReport:
    """Simulate ``queries`` on ``config`` under ``policy``; deterministic per seed."""
    if not queries:
        raise ParameterError("query stream is empty")
    if base_instance_count(config, catalog) < 1:
        raise ConfigurationError("configuration needs at least one base instance")

    by_id = {t.type_id: t for t in catalog}
    instances: list[InstanceState] = []
    for tid, count in zip(config.type_ids, config.counts):
        for _ in range(count):
            instances.append(InstanceState(len(instances), by_id[tid]))
    inst_tuple = tuple(instances)
    type_ids = tuple(inst.type_id for inst in instances)
    is_base = np.array([inst.spec.is_base for inst in instances])
    coeffs = heterogeneity_coefficients(list(catalog), settings.max_batch)
    coeff_by_instance = np.array([coeffs[tid] for tid in type_ids])

    predictor = LatencyPredictor(settings.max_batch)
    if settings.predictor_prior == "true_curve":
        for t in catalog:
            predictor.set_prior(t.type_id, t.curve.intercept_ms, t.curve.slope_ms_per_request)
    elif settings.predictor_prior != "none":
        raise ParameterError(f"unknown predictor_prior {settings.predictor_prior!r}")

    rng = np.random.default_rng(seed)
    overhead = settings.controller_overhead_ms
    n_queries = len(queries)
    latencies_ms = np.empty(n_queries)
    completed = 0
    violations = 0
    busy_s_by_type: dict[int, float] = {tid: 0.0 for tid in config.type_ids}
    completions: list[tuple[float, int, int]] = []  # (time, query id, instance index)
    queue: list[Query] = []
    arr_i = 0
    last_completion_s = 0.0

    def start(inst: InstanceState, query: Query, now: float, predicted_ms: float) -> None:
        exec_ms = true_latency(inst.spec, query.batch_size, settings.noise_std_fraction,
                               rng, settings.max_batch)
        service_ms = exec_ms + overhead
        inst.running_query = query
        inst._running_true_ms = exec_ms
        inst._pred_finish_s = now + (predicted_ms + overhead) / 1000.0
        busy_s_by_type[inst.type_id] += service_ms / 1000.0
        heappush(completions, (now + service_ms / 1000.0, query.id, inst.index))

    def apply_commitment(c: Commitment, now: float) -> None:
        inst = instances[c.instance_index]
        predicted_ms = predictor.predict(inst.type_id, c.query.batch_size)
        if inst.running_query is None:
            if inst.committed:
                raise SimulationInvariantError("idle instance with a committed backlog")
            start(inst, c.query, now, predicted_ms)
        else:
            inst.committed.append((c.query, predicted_ms))
            inst._queue_pred_ms += predicted_ms

    def dispatch(now: float) -> None:
        if not queue:
            return
        busy = np.array([inst.estimated_remaining_ms(now) for inst in instances])
        ctx = PolicyContext(
            now=now, queue=tuple(queue), instances=inst_tuple, busy_ms=busy,
            type_ids=type_ids, is_base=is_base, coeffs=coeffs,
            coeff_by_instance=coeff_by_instance, predictor=predictor, qos=qos,
            max_batch=settings.max_batch,
        )
        commitments = policy.dispatch(ctx)
        if after_dispatch is not None:
            after_dispatch(ctx, commitments)
        seen: set[int] = set()
        for c in commitments:
            if c.query.id in seen:
                raise SimulationInvariantError(f"query {c.query.id} committed twice in one round")
            if not 0 <= c.instance_index < len(instances):
                raise SimulationInvariantError(f"commitment to unknown instance {c.instance_index}")
            seen.add(c.query.id)
            try:
                queue.remove(c.query)
            except ValueError:
                raise SimulationInvariantError(
                    f"policy committed query {c.query.id} that is not queued") from None
            apply_commitment(c, now)

    while completed < n_queries:
        have_arrival = arr_i < n_queries
        have_completion = bool(completions)
        if not have_arrival and not have_completion:
            raise SimulationInvariantError(
                f"no events left but {len(queue)} queries still queued (policy starvation)")
        if have_completion and (
            not have_arrival or completions[0][0] <= queries[arr_i].arrival_time
        ):
            now, _, idx = heappop(completions)
            inst = instances[idx]
            query = inst.running_query
            assert query is not None
            last_completion_s = max(last_completion_s, now)
            latency_ms = (now - query.arrival_time) * 1000.0
            latencies_ms[completed] = latency_ms
            completed += 1
            if latency_ms > qos.t_qos_ms:
                violations += 1
            predictor.observe(inst.type_id, query.batch_size, inst._running_true_ms)
            inst.running_query = None
            if inst.committed:
                next_query, predicted_ms = inst.committed.popleft()
                inst._queue_pred_ms -= predicted_ms
                start(inst, next_query, now, predicted_ms)
            if queue:
                dispatch(now)
        else:
            query = queries[arr_i]
            arr_i += 1
            queue.append(query)
            dispatch(query.arrival_time)

    first_arrival = min(q.arrival_time for q in queries)
    makespan = max(last_completion_s - first_arrival, 1e-12)
    if offered_rate_qps is None:
        span = max(q.arrival_time for q in queries) - first_arrival
        offered_rate_qps = (n_queries - 1) / span if n_queries > 1 and span > 0 else 0.0
    utilization = tuple(
        (tid, busy_s_by_type[tid] / (makespan * count) if count else 0.0)
        for tid, count in zip(config.type_ids, config.counts)
    )
    return SimReport(
        offered_rate_qps=float(offered_rate_qps),
        completed=completed,
        qos_violations=violations,
        p99_latency_ms=float(np.percentile(latencies_ms, qos.percentile)),
        achieved_goodput_qps=(completed - violations) / makespan,
        utilization=utilization,
        seed=seed,
        policy=policy.name,
        makespan_s=makespan,
    )


def qos_verdict(report: SimReport, qos: QoSSpec) -> str:
    """``"pass"`` iff the report's tail latency meets the unscaled QoS target."""
    if report.completed < 1:
        raise StateError("verdict requires at least one completion")
    return "pass" if report.p99_latency_ms <= qos.t_qos_ms else "fail"


@dataclass(frozen=True)
class SearchParams:
    """Knobs for the allowable-rate sweep."""

    trial_queries: int = 20_000
    resolution_qps: float = 1.0
    start_rate_qps: float = 1.0
    max_rate_qps: float = 1_000_000.0


def allowable_throughput(
    config: HeterogeneousConfig,
    catalog: Sequence[InstanceTypeSpec],
    policy: DispatchPolicy,
    workload_template: WorkloadSpec,
    qos: QoSSpec,
    settings: LatencySettings = LatencySettings(),
    params: SearchParams = SearchParams(),
    run_seed: int = 0,
) -> float:
    """Largest offered rate whose QoS verdict passes, within the resolution.

    Geometric ramp (doubling from ``start_rate_qps``) until the first failing
    rate, then bisection.  Every trial regenerates the workload template at
    the probed rate with a seed derived from (template seed, rate), so trials
    are reproducible and independent of sweep order.
    """
    def trial_passes(rate: float) -> bool:
        rate_key = int(round(rate * 1e6))
        stream = generate_stream(replace(
            workload_template,
            arrival=PoissonArrivals(rate_qps=rate),
            num_queries=params.trial_queries,
            seed=stable_seed(workload_template.seed, rate_key, 0x51),
        ))
        report = run(config, catalog, stream, policy, qos, settings,
                     seed=stable_seed(run_seed, rate_key, 0xA7),
                     offered_rate_qps=rate)
        return qos_verdict(report, qos) == "pass"

    lo = params.start_rate_qps
    if not trial_passes(lo):
        return 0.0
    hi = None
    while hi is None:
        candidate = min(lo * 2.0, params.max_rate_qps)
        if candidate <= lo:
            return lo
        if trial_passes(candidate):
            lo = candidate
            if lo >= params.max_rate_qps:
                return lo
        else:
            hi = candidate
    while hi - lo > params.resolution_qps:
        mid = (lo + hi) / 2.0
        if trial_passes(mid):
            lo = mid
        else:
            hi = mid
    return lo
