"""QoS-penalized min-cost bipartite matching of queries to instances.

The cost of pairing query ``i`` with instance ``j`` is the weighted
completion time ``C_j * L[i][j]``: the instance's remaining busy time plus
the predicted serving latency, scaled by the instance type's heterogeneity
coefficient.  Pairings whose completion time plus already-accrued queue
wait would exceed the guarded QoS deadline are penalized by a large
constant (default 10x the QoS target) instead of being excluded, which
keeps the rectangular assignment always feasible.

``solve`` uses the Jonker-Volgenant solver from scipy;
``brute_force_solve`` is an independent exhaustive oracle used to validate
optimality.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import fsum
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError
from .latency import LatencyPredictor, QoSSpec
from .workload import Query

PENALTY_MULTIPLIER_DEFAULT = 10.0

BRUTE_FORCE_LIMIT = 8


@dataclass
class CostMatrix:
    """Weighted, penalty-rewritten cost matrix for one matching round."""

    cost: np.ndarray        # (m, n) C_j-scaled costs, finite and >= 0
    penalized: np.ndarray   # (m, n) bool: deadline-violating pairings
    completion_ms: np.ndarray  # (m, n) unscaled completion times L
    wait_ms: np.ndarray     # (m,) queue wait accrued per query

    @property
    def m(self) -> int:
        return self.cost.shape[0]

    @property
    def n(self) -> int:
        return self.cost.shape[1]


@dataclass(frozen=True)
class AssignmentPlan:
    """One-to-one pairing of size min(m, n), sorted by query index."""

    pairs: tuple[tuple[int, int], ...]
    unassigned_queries: tuple[int, ...]
    unassigned_instances: tuple[int, ...]
    total_cost: float


def cost_matrix_from_arrays(
    batches: np.ndarray,
    wait_ms: np.ndarray,
    busy_ms: np.ndarray,
    type_ids: Sequence[int],
    coeff_by_instance: np.ndarray,
    predictor: LatencyPredictor,
    qos: QoSSpec,
    penalty_multiplier: float = PENALTY_MULTIPLIER_DEFAULT,
) -> CostMatrix:
    """Vectorized cost-matrix construction from per-query/per-instance arrays."""
    m, n = len(batches), len(busy_ms)
    if m < 1 or n < 1:
        raise ParameterError("cost matrix needs at least one query and one instance")
    preds = {tid: predictor.predict_batches(tid, batches) for tid in set(type_ids)}
    completion = np.empty((m, n))
    for j, tid in enumerate(type_ids):
        completion[:, j] = busy_ms[j] + preds[tid]
    penalized = (completion + wait_ms[:, None]) > qos.effective_deadline_ms
    rewritten = np.where(penalized, penalty_multiplier * qos.t_qos_ms, completion)
    cost = rewritten * coeff_by_instance[None, :]
    return CostMatrix(cost=cost, penalized=penalized, completion_ms=completion, wait_ms=wait_ms)


def build_cost_matrix(
    queries: Sequence[Query],
    instances: Sequence,
    predictor: LatencyPredictor,
    coeffs: dict[int, float],
    qos: QoSSpec,
    now: float,
    penalty_multiplier: float = PENALTY_MULTIPLIER_DEFAULT,
) -> CostMatrix:
    """Build the matching cost matrix at simulation time ``now`` (seconds).

    ``instances`` are runtime states exposing ``type_id`` and
    ``estimated_remaining_ms(now)``; waits and completion times are in ms.
    """
    batches = np.array([q.batch_size for q in queries], dtype=np.int64)
    wait_ms = (now - np.array([q.first_queued_time for q in queries])) * 1000.0
    busy_ms = np.array([inst.estimated_remaining_ms(now) for inst in instances])
    type_ids = [inst.type_id for inst in instances]
    coeff = np.array([coeffs[tid] for tid in type_ids])
    return cost_matrix_from_arrays(
        batches, wait_ms, busy_ms, type_ids, coeff, predictor, qos, penalty_multiplier
    )


def _plan_from_assignment(cost: np.ndarray, assign: dict[int, int]) -> AssignmentPlan:
    pairs = tuple(sorted(assign.items()))
    total = fsum(cost[i][j] for i, j in pairs)
    m, n = len(cost), len(cost[0])
    used_cols = set(assign.values())
    return AssignmentPlan(
        pairs=pairs,
        unassigned_queries=tuple(i for i in range(m) if i not in assign),
        unassigned_instances=tuple(j for j in range(n) if j not in used_cols),
        total_cost=total,
    )


def _canonicalize(cost: list[list[float]], assign: dict[int, int], m: int, n: int) -> dict[int, int]:
    """Resolve cost ties toward (lowest query index, lowest instance index).

    Applies exactly cost-neutral local moves until none applies; every move
    strictly decreases the sorted pair list lexicographically, so the loop
    terminates.  Cost comparisons are exact, matching the crafted tie cases
    where equal entries share a bit pattern.
    """
    while True:
        changed = False
        used_cols = set(assign.values())
        # Move a query to an equal-cost lower-index idle instance.
        for i in sorted(assign):
            j = assign[i]
            for j2 in range(j):
                if j2 in used_cols:
                    continue
                if cost[i][j2] == cost[i][j]:
                    assign[i] = j2
                    used_cols.discard(j)
                    used_cols.add(j2)
                    changed = True
                    break
        # Cost-neutral swap giving the lower query the lower instance.
        rows = sorted(assign)
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                i1, i2 = rows[a], rows[b]
                j1, j2 = assign[i1], assign[i2]
                if j2 < j1 and cost[i1][j1] + cost[i2][j2] == cost[i1][j2] + cost[i2][j1]:
                    assign[i1], assign[i2] = j2, j1
                    changed = True
        # Hand an assigned slot to an equal-cost lower-index waiting query.
        if len(assign) < m:
            for i1 in (i for i in range(m) if i not in assign):
                take: tuple[int, int] | None = None
                for i2, j in assign.items():
                    if i2 > i1 and cost[i1][j] == cost[i2][j]:
                        if take is None or j < take[0]:
                            take = (j, i2)
                if take is not None:
                    del assign[take[1]]
                    assign[i1] = take[0]
                    changed = True
        if not changed:
            return assign


def solve(matrix: CostMatrix) -> AssignmentPlan:
    """Minimum-total-cost assignment of size min(m, n).

    Penalty construction guarantees feasibility even when every pairing
    violates QoS.  Ties between equal-cost optima are broken toward the
    lowest query index, then the lowest instance index.
    """
    row_ind, col_ind = linear_sum_assignment(matrix.cost)
    assign = {int(i): int(j) for i, j in zip(row_ind, col_ind)}
    cost_rows = matrix.cost.tolist()
    assign = _canonicalize(cost_rows, assign, matrix.m, matrix.n)
    return _plan_from_assignment(cost_rows, assign)


def brute_force_solve(matrix: CostMatrix) -> AssignmentPlan:
    """Exhaustive oracle over all size-min(m, n) injections; same tie-break."""
    m, n = matrix.m, matrix.n
    k = min(m, n)
    if k > BRUTE_FORCE_LIMIT:
        raise ParameterError(f"brute force limited to min(m, n) <= {BRUTE_FORCE_LIMIT}")
    cost_rows = matrix.cost.tolist()
    if m <= n:
        row_sets = [tuple(range(m))]
    else:
        row_sets = list(itertools.combinations(range(m), n))
    best_pairs: tuple[tuple[int, int], ...] | None = None
    best_cost = float("inf")
    for rows in row_sets:
        for cols in itertools.permutations(range(n), k):
            pairs = tuple(zip(rows, cols))
            total = fsum(cost_rows[i][j] for i, j in pairs)
            if total < best_cost or (total == best_cost and pairs < best_pairs):
                best_cost = total
                best_pairs = pairs
    assert best_pairs is not None
    return _plan_from_assignment(cost_rows, dict(best_pairs))
