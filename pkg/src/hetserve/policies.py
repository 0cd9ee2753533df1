"""Dispatch policies for the simulation kernel.

``kairos`` runs a weighted min-cost matching round over all queued queries
and all instances (busy included); ``ribbon`` is QoS-blind FCFS preferring
base instances; ``drs`` splits traffic by a static batch-size threshold;
``clkwrk`` keeps per-instance queues and picks the earliest
QoS-respecting predicted completion.  ``oracle`` is the clairvoyant
reference computed analytically, not via event simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterError
from .latency import InstanceTypeSpec, QoSSpec, qos_batch_limit
from .matcher import PENALTY_MULTIPLIER_DEFAULT, cost_matrix_from_arrays, solve
from .simkernel import (
    Commitment,
    HeterogeneousConfig,
    LatencySettings,
    PolicyContext,
    SearchParams,
    allowable_throughput,
    base_instance_count,
    stable_seed,
)
from .workload import MAX_BATCH_DEFAULT, WorkloadSpec

POLICY_NAMES = ("kairos", "ribbon", "drs", "clkwrk", "oracle")


def kairos_dispatch(
    ctx: PolicyContext, penalty_multiplier: float = PENALTY_MULTIPLIER_DEFAULT
) -> list[Commitment]:
    """One matching round: commit every matched pair that respects QoS.

    Penalized-matched queries stay queued for a later round, except that a
    query which could not meet the guarded deadline even on an idle instance
    of the fastest type is force-committed to its minimum-completion-time
    instance (the starvation escape; the violation is accepted).
    """
    batches = np.array([q.batch_size for q in ctx.queue], dtype=np.int64)
    wait_ms = (ctx.now - np.array([q.first_queued_time for q in ctx.queue])) * 1000.0
    matrix = cost_matrix_from_arrays(
        batches, wait_ms, ctx.busy_ms, ctx.type_ids, ctx.coeff_by_instance,
        ctx.predictor, ctx.qos, penalty_multiplier,
    )
    plan = solve(matrix)
    commitments: list[Commitment] = []
    committed_rows: set[int] = set()
    extra_busy = np.zeros(len(ctx.instances))
    for i, j in plan.pairs:
        if matrix.penalized[i, j]:
            continue
        commitments.append(Commitment(ctx.queue[i], j))
        committed_rows.add(i)
        extra_busy[j] += matrix.completion_ms[i, j] - ctx.busy_ms[j]

    deadline = ctx.qos.effective_deadline_ms
    distinct_types = sorted(set(ctx.type_ids))
    best_pred_cache: dict[int, float] = {}
    for i, query in enumerate(ctx.queue):
        if i in committed_rows:
            continue
        best_pred = best_pred_cache.get(query.batch_size)
        if best_pred is None:
            best_pred = min(ctx.predictor.predict(t, query.batch_size) for t in distinct_types)
            best_pred_cache[query.batch_size] = best_pred
        if wait_ms[i] + best_pred <= deadline:
            continue
        completion = matrix.completion_ms[i] + extra_busy
        j = int(np.argmin(completion))
        commitments.append(Commitment(query, j, forced=True, penalized=True))
        extra_busy[j] += matrix.completion_ms[i, j] - ctx.busy_ms[j]
    return commitments


def ribbon_dispatch(ctx: PolicyContext) -> list[Commitment]:
    """FCFS onto idle instances, preferring base type; QoS-blind."""
    idle = [j for j, inst in enumerate(ctx.instances) if inst.is_idle]
    idle.sort(key=lambda j: (not ctx.instances[j].spec.is_base, ctx.type_ids[j], j))
    commitments = []
    for query, j in zip(ctx.queue, idle):
        commitments.append(Commitment(query, j))
    return commitments


def drs_dispatch(ctx: PolicyContext, threshold: int) -> list[Commitment]:
    """Static split: batches above the threshold go to base instances,
    the rest to auxiliaries; FCFS within each class, no work stealing.

    If the configuration has zero instances of the designated class the
    query falls back to the other class.
    """
    idle_base = [j for j, inst in enumerate(ctx.instances)
                 if inst.is_idle and inst.spec.is_base]
    idle_aux = [j for j, inst in enumerate(ctx.instances)
                if inst.is_idle and not inst.spec.is_base]
    has_base = bool(ctx.is_base.any())
    has_aux = bool((~ctx.is_base).any())
    commitments = []
    blocked = {True: False, False: False}  # class -> head-of-class waiting
    for query in ctx.queue:
        use_base = query.batch_size > threshold
        if use_base and not has_base:
            use_base = False
        elif not use_base and not has_aux:
            use_base = True
        pool = idle_base if use_base else idle_aux
        if blocked[use_base] or not pool:
            blocked[use_base] = True
            continue
        commitments.append(Commitment(query, pool.pop(0)))
    return commitments


def clkwrk_dispatch(ctx: PolicyContext) -> list[Commitment]:
    """Append each query to the per-instance queue with the smallest
    predicted completion among QoS-respecting instances; if none respects
    QoS, the globally earliest predicted completion takes it."""
    deadline = ctx.qos.effective_deadline_ms
    extra = np.zeros(len(ctx.instances))
    pred_cache: dict[int, np.ndarray] = {}
    commitments = []
    for query in ctx.queue:
        preds = pred_cache.get(query.batch_size)
        if preds is None:
            by_type = {t: ctx.predictor.predict(t, query.batch_size)
                       for t in set(ctx.type_ids)}
            preds = np.array([by_type[t] for t in ctx.type_ids])
            pred_cache[query.batch_size] = preds
        completion = ctx.busy_ms + extra + preds
        wait = (ctx.now - query.first_queued_time) * 1000.0
        feasible = (completion + wait) <= deadline
        if feasible.any():
            j = int(np.argmin(np.where(feasible, completion, np.inf)))
            commitments.append(Commitment(query, j))
        else:
            j = int(np.argmin(completion))
            commitments.append(Commitment(query, j, penalized=True))
        extra[j] += preds[j]
    return commitments


@dataclass(frozen=True)
class KairosPolicy:
    penalty_multiplier: float = PENALTY_MULTIPLIER_DEFAULT
    name: str = "kairos"

    def dispatch(self, ctx: PolicyContext) -> list[Commitment]:
        return kairos_dispatch(ctx, self.penalty_multiplier)


@dataclass(frozen=True)
class RibbonPolicy:
    name: str = "ribbon"

    def dispatch(self, ctx: PolicyContext) -> list[Commitment]:
        return ribbon_dispatch(ctx)


@dataclass(frozen=True)
class DrsPolicy:
    threshold: int = 0
    name: str = "drs"

    def dispatch(self, ctx: PolicyContext) -> list[Commitment]:
        return drs_dispatch(ctx, self.threshold)


@dataclass(frozen=True)
class ClkwrkPolicy:
    name: str = "clkwrk"

    def dispatch(self, ctx: PolicyContext) -> list[Commitment]:
        return clkwrk_dispatch(ctx)


def make_policy(
    name: str,
    drs_threshold: int = 0,
    penalty_multiplier: float = PENALTY_MULTIPLIER_DEFAULT,
):
    """Build a dispatch policy by its registry name."""
    if name == "kairos":
        return KairosPolicy(penalty_multiplier=penalty_multiplier)
    if name == "ribbon":
        return RibbonPolicy()
    if name == "drs":
        return DrsPolicy(threshold=drs_threshold)
    if name == "clkwrk":
        return ClkwrkPolicy()
    if name == "oracle":
        raise ParameterError(
            "policy 'oracle' is a clairvoyant reference computed analytically; "
            "it cannot drive an event-simulated run (see compare)")
    raise ParameterError(f"unknown policy {name!r}; valid: {', '.join(POLICY_NAMES)}")


@dataclass(frozen=True)
class ThresholdTuneResult:
    threshold: int
    evaluations: int
    trace: tuple[tuple[int, float], ...]  # (threshold, allowable qps)


def drs_tune_threshold(
    config: HeterogeneousConfig,
    catalog: Sequence[InstanceTypeSpec],
    workload_template: WorkloadSpec,
    qos: QoSSpec,
    settings: LatencySettings = LatencySettings(),
    params: SearchParams = SearchParams(),
    step: int = 25,
    run_seed: int = 0,
    evaluate: Optional[Callable[[int], float]] = None,
) -> ThresholdTuneResult:
    """Hill-climb the batch threshold upward from 0, stopping at the first
    local maximum of allowable throughput.  ``evaluate`` is injectable for
    tests; the default measures a full allowable-rate sweep per threshold."""
    if step < 1:
        raise ParameterError("step must be >= 1")
    by_id = {t.type_id: t for t in catalog}
    aux_count = sum(c for tid, c in zip(config.type_ids, config.counts)
                    if not by_id[tid].is_base)
    if aux_count == 0:
        return ThresholdTuneResult(threshold=0, evaluations=0, trace=())
    candidates = list(range(0, workload_template.max_batch + 1, step))
    if len(candidates) == 1:
        return ThresholdTuneResult(threshold=0, evaluations=0, trace=())

    if evaluate is None:
        def evaluate(threshold: int) -> float:
            return allowable_throughput(
                config, catalog, DrsPolicy(threshold=threshold), workload_template,
                qos, settings, params, run_seed=stable_seed(run_seed, threshold),
            )

    trace: list[tuple[int, float]] = []
    best_t = candidates[0]
    best_q = evaluate(best_t)
    trace.append((best_t, best_q))
    for t in candidates[1:]:
        q = evaluate(t)
        trace.append((t, q))
        if q > best_q:
            best_t, best_q = t, q
        else:
            break
    return ThresholdTuneResult(threshold=best_t, evaluations=len(trace), trace=tuple(trace))


def oracle_throughput(
    config: HeterogeneousConfig,
    catalog: Sequence[InstanceTypeSpec],
    batch_population: Sequence[int],
    qos: QoSSpec,
    max_batch: int = MAX_BATCH_DEFAULT,
) -> float:
    """Clairvoyant reference throughput for a batch population.

    Queries are pre-sorted by batch size and arrive exactly when served.
    Whenever a base instance frees it takes the largest remaining query;
    an auxiliary instance takes the smallest remaining query while that
    query still fits its QoS batch limit, then retires.  Returns served
    queries divided by the schedule makespan.
    """
    from heapq import heapify, heappop, heappush

    if base_instance_count(config, catalog) < 1:
        raise ParameterError("oracle needs at least one base instance")
    if len(batch_population) == 0:
        raise ParameterError("empty batch population")
    by_id = {t.type_id: t for t in catalog}
    limits = {t.type_id: qos_batch_limit(t, qos, max_batch) for t in catalog}

    batches = np.sort(np.asarray(batch_population, dtype=np.int64))
    lo, hi = 0, len(batches) - 1
    heap: list[tuple[float, int, int, bool]] = []  # (free time, type_id, ordinal, is_base)
    ordinal = 0
    for tid, count in zip(config.type_ids, config.counts):
        for _ in range(count):
            heap.append((0.0, tid, ordinal, by_id[tid].is_base))
            ordinal += 1
    heapify(heap)

    served = 0
    makespan = 0.0
    while lo <= hi and heap:
        free_at, tid, k, is_base = heappop(heap)
        spec = by_id[tid]
        if is_base:
            # Skip queries too large even for this instance; nothing else can
            # take them either, so they are dropped uncounted.
            while hi >= lo and batches[hi] > limits[tid]:
                hi -= 1
            if hi < lo:
                continue
            b = int(batches[hi])
            hi -= 1
        else:
            b = int(batches[lo])
            if b > limits[tid]:
                continue  # retire: every remaining query violates on this type
            lo += 1
        finish = free_at + spec.curve.latency_ms(b) / 1000.0
        served += 1
        makespan = max(makespan, finish)
        heappush(heap, (finish, tid, k, is_base))
    if served == 0:
        return 0.0
    return served / makespan
