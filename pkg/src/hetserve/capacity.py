"""Throughput upper bounds and one-shot configuration selection.

The bound for a configuration splits the observed batch mix at the largest
auxiliary QoS batch limit ``s'``: auxiliaries absorb batches below ``s'``;
the base type must absorb the rest at its large-batch rate.  Whichever
side saturates first caps the total rate, and any base slack left over
serves additional mixed traffic.  Rates come from the true latency curves
averaged over the monitoring window, so no online evaluation is needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ParameterError, StateError
from .latency import InstanceTypeSpec, QoSSpec, qos_batch_limit
from .simkernel import HeterogeneousConfig, make_config
from .workload import MAX_BATCH_DEFAULT, empirical_fraction_below


@dataclass(frozen=True)
class RateProfile:
    """Per-type standalone rates over the conditional batch populations.

    ``q_b`` is the base type's single-instance rate over the full mix,
    ``q_b_splus`` its rate over batches >= ``s_prime``, and ``q_a[tid]``
    an auxiliary type's rate over batches < ``s_prime`` (optimistically
    including batches above that type's own limit).  All rates are QPS.
    """

    base_type_id: int
    q_b: float
    q_b_splus: float
    q_a: dict[int, float]
    s: dict[int, int]
    f: dict[int, float]
    s_prime: int
    f_prime: float


def rate_profile(
    types: Sequence[InstanceTypeSpec],
    qos: QoSSpec,
    window: Sequence[int] | np.ndarray,
    max_batch: int = MAX_BATCH_DEFAULT,
) -> RateProfile:
    """Build the rate profile from the instance catalog and a batch window."""
    batches = np.asarray(window, dtype=np.int64)
    if batches.size == 0:
        raise StateError("empty monitoring window")
    bases = [t for t in types if t.is_base]
    if len(bases) != 1:
        raise ConfigurationError(f"catalog must have exactly one base type, got {len(bases)}")
    base = bases[0]
    if qos_batch_limit(base, qos, max_batch) != max_batch:
        raise ConfigurationError(
            "base type must meet QoS for every batch size up to max_batch")

    aux_types = [t for t in types if not t.is_base]
    s = {t.type_id: qos_batch_limit(t, qos, max_batch) for t in aux_types}
    f = {tid: empirical_fraction_below(batches, limit) for tid, limit in s.items()}
    s_prime = max(s.values(), default=0)
    f_prime = empirical_fraction_below(batches, s_prime) if s_prime > 0 else 0.0

    base_ms = base.curve.latency_ms(batches.astype(float))
    q_b = 1000.0 / float(base_ms.mean())
    splus = batches >= s_prime
    q_b_splus = 1000.0 / float(base_ms[splus].mean()) if splus.any() else 0.0

    below = batches < s_prime
    q_a: dict[int, float] = {}
    for t in aux_types:
        if s[t.type_id] == 0 or not below.any():
            q_a[t.type_id] = 0.0
        else:
            aux_ms = t.curve.latency_ms(batches[below].astype(float))
            q_a[t.type_id] = 1000.0 / float(aux_ms.mean())
    return RateProfile(
        base_type_id=base.type_id, q_b=q_b, q_b_splus=q_b_splus,
        q_a=q_a, s=s, f=f, s_prime=s_prime, f_prime=f_prime,
    )


def upper_bound(config: HeterogeneousConfig, profile: RateProfile) -> float:
    """Throughput in QPS that no distribution policy can exceed on ``config``."""
    u = config.count_for(profile.base_type_id)
    if u < 1:
        raise ParameterError("configuration needs at least one base instance")
    aux_rate = sum(config.count_for(tid) * q for tid, q in profile.q_a.items())
    fp = profile.f_prime
    if fp <= 0.0:
        return u * profile.q_b
    if fp >= 1.0:
        return aux_rate + u * profile.q_b
    offload = aux_rate * (1.0 - fp) / fp
    base_large = u * profile.q_b_splus
    if base_large <= offload:
        # Base-bottleneck: large batches cap the total at the base rate.
        return base_large / (1.0 - fp)
    slack = (base_large - offload) / base_large
    return aux_rate / fp + slack * u * profile.q_b


def enumerate_configs(
    catalog: Sequence[InstanceTypeSpec], budget_per_hour: float
) -> list[HeterogeneousConfig]:
    """All count vectors with at least one base instance and cost <= budget,
    in ascending lexicographic order over the catalog's type order."""
    bases = [t for t in catalog if t.is_base]
    if len(bases) != 1:
        raise ConfigurationError(f"catalog must have exactly one base type, got {len(bases)}")
    if budget_per_hour + 1e-9 < bases[0].price_per_hour:
        raise ConfigurationError(
            f"budget {budget_per_hour} cannot afford one base instance "
            f"({bases[0].price_per_hour}/hr)")

    configs: list[HeterogeneousConfig] = []
    counts = [0] * len(catalog)

    def extend(idx: int, remaining: float) -> None:
        if idx == len(catalog):
            configs.append(make_config(catalog, counts))
            return
        t = catalog[idx]
        c = 1 if t.is_base else 0
        while c * t.price_per_hour <= remaining + 1e-9:
            counts[idx] = c
            extend(idx + 1, remaining - c * t.price_per_hour)
            c += 1
        counts[idx] = 0

    extend(0, budget_per_hour)
    return configs


@dataclass(frozen=True)
class UpperBoundTable:
    """Configurations ranked by upper bound, descending; ties lexicographic."""

    entries: tuple[tuple[HeterogeneousConfig, float], ...]
    base_type_id: int

    def __len__(self) -> int:
        return len(self.entries)


def build_upper_bound_table(
    configs: Sequence[HeterogeneousConfig], profile: RateProfile
) -> UpperBoundTable:
    scored = [(cfg, upper_bound(cfg, profile)) for cfg in configs]
    scored.sort(key=lambda e: (-e[1], e[0].counts))
    return UpperBoundTable(entries=tuple(scored), base_type_id=profile.base_type_id)


TOP_AGREEMENT = 3
TOP_CLUSTER = 10


def choose_config_detailed(table: UpperBoundTable) -> tuple[HeterogeneousConfig, str]:
    """One-shot pick: the top entry when the top-3 agree on the base count,
    otherwise the most central of the top-10 by summed squared distance."""
    if not table.entries:
        raise StateError("empty upper-bound table")
    top = table.entries[:TOP_AGREEMENT]
    base_counts = {cfg.count_for(table.base_type_id) for cfg, _ in top}
    if len(base_counts) == 1:
        return table.entries[0][0], "top3_base_agreement"
    cluster = table.entries[:TOP_CLUSTER]
    vectors = np.array([cfg.counts for cfg, _ in cluster], dtype=float)
    diffs = vectors[:, None, :] - vectors[None, :, :]
    sse = (diffs ** 2).sum(axis=2).sum(axis=1)
    ranked = sorted(
        range(len(cluster)),
        key=lambda k: (sse[k], -cluster[k][1], cluster[k][0].counts),
    )
    return cluster[ranked[0]][0], "sse"


def choose_config(table: UpperBoundTable) -> HeterogeneousConfig:
    return choose_config_detailed(table)[0]


def export_table_csv(table: UpperBoundTable, catalog: Sequence[InstanceTypeSpec], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"count_{t.name}" for t in catalog] + ["cost_per_hour", "qps_max"])
        for cfg, qps in table.entries:
            writer.writerow(list(cfg.counts) + [f"{cfg.cost_per_hour:.6f}", f"{qps:.6f}"])
