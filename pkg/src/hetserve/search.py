"""Upper-bound-assisted configuration search and a random-search baseline.

Both searchers count online evaluations; the assisted variant walks
configurations in descending upper-bound order, filters out everything
whose bound cannot beat the best measured throughput, and prunes
sub-configurations (component-wise dominated count vectors) of each
evaluated configuration.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .capacity import UpperBoundTable
from .errors import ParameterError
from .simkernel import HeterogeneousConfig

logger = logging.getLogger(__name__)

Evaluator = Callable[[HeterogeneousConfig], float]


def is_subconfig(a: HeterogeneousConfig, b: HeterogeneousConfig) -> bool:
    """True when ``a`` is component-wise <= ``b`` with at least one strict <."""
    if a.type_ids != b.type_ids:
        raise ParameterError("configs span different type catalogs")
    return a.counts != b.counts and all(x <= y for x, y in zip(a.counts, b.counts))


@dataclass(frozen=True)
class TraceEntry:
    config: HeterogeneousConfig
    qps: float
    live_after: int


@dataclass
class SearchTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    best_config: HeterogeneousConfig | None = None
    best_qps: float = 0.0
    pruned_by_bound: int = 0
    pruned_as_subconfig: int = 0

    @property
    def evaluations_used(self) -> int:
        return len(self.entries)


def _sub_counts(counts: tuple[int, ...], of: tuple[int, ...]) -> bool:
    return counts != of and all(x <= y for x, y in zip(counts, of))


def kairos_plus(table: UpperBoundTable, evaluator: Evaluator) -> SearchTrace:
    """Evaluate in descending upper-bound order with bound and sub-config
    pruning; stops once the live set is empty.

    The bound filter is non-strict (``UB <= best``), so a measured optimum
    can prune other representations of itself; the returned best throughput
    is unaffected.
    """
    ub_of = {cfg.counts: ub for cfg, ub in table.entries}
    live = set(ub_of)
    trace = SearchTrace()
    for cfg, ub in table.entries:
        if cfg.counts not in live:
            continue
        qps = evaluator(cfg)
        live.discard(cfg.counts)
        trace.entries.append(TraceEntry(cfg, qps, 0))
        if qps > ub * (1 + 1e-9):
            logger.warning("measured %.3f QPS exceeds its own upper bound %.3f for %s "
                           "(simulation noise); keeping the bound filter as-is",
                           qps, ub, cfg.counts)
        if qps > trace.best_qps:
            trace.best_qps = qps
            trace.best_config = cfg
            dominated = [c for c in live if ub_of[c] <= trace.best_qps]
            for c in dominated:
                live.discard(c)
            trace.pruned_by_bound += len(dominated)
        subs = [c for c in live if _sub_counts(c, cfg.counts)]
        for c in subs:
            live.discard(c)
        trace.pruned_as_subconfig += len(subs)
        trace.entries[-1] = TraceEntry(cfg, qps, len(live))
        if not live:
            break
    return trace


def random_search(
    configs: Sequence[HeterogeneousConfig],
    evaluator: Evaluator,
    seed: int,
    with_pruning: bool = True,
) -> SearchTrace:
    """Uniformly shuffled evaluation order with optional sub-config pruning."""
    if not configs:
        raise ParameterError("no configurations to search")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(configs))
    live = {cfg.counts for cfg in configs}
    trace = SearchTrace()
    for idx in order:
        cfg = configs[int(idx)]
        if cfg.counts not in live:
            continue
        qps = evaluator(cfg)
        live.discard(cfg.counts)
        if qps > trace.best_qps:
            trace.best_qps = qps
            trace.best_config = cfg
        if with_pruning:
            subs = [c for c in live if _sub_counts(c, cfg.counts)]
            for c in subs:
                live.discard(c)
            trace.pruned_as_subconfig += len(subs)
        trace.entries.append(TraceEntry(cfg, qps, len(live)))
        if not live:
            break
    return trace


def export_trace_csv(trace: SearchTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "config", "qps", "live_set_size"])
        for it, entry in enumerate(trace.entries):
            writer.writerow([
                it,
                ",".join(str(c) for c in entry.config.counts),
                f"{entry.qps:.6f}",
                entry.live_after,
            ])
