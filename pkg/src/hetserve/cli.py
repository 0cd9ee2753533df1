"""Experiment runner: scenario files, planning, search, and policy comparison.

Scenario files are strict JSON (unknown keys are rejected) bundling the
instance catalog, QoS target, cost budget, workload description, and trial
parameters.  Every command is reproducible from the scenario file and its
seeds alone; reports embed a digest of the scenario file.  Exit codes:
0 success, 2 usage or parse error, 3 infeasible scenario.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .capacity import (
    build_upper_bound_table,
    choose_config_detailed,
    enumerate_configs,
    export_table_csv,
    rate_profile,
)
from .errors import ConfigurationError, FormatError, HetserveError, ParameterError, StateError
from .latency import InstanceTypeSpec, LatencyCurve, QoSSpec
from .matcher import PENALTY_MULTIPLIER_DEFAULT
from .policies import POLICY_NAMES, drs_tune_threshold, make_policy, oracle_throughput
from .search import export_trace_csv, kairos_plus, random_search
from .simkernel import (
    HeterogeneousConfig,
    LatencySettings,
    SearchParams,
    allowable_throughput,
    make_config,
    run,
    stable_seed,
)
from .workload import (
    MONITOR_WINDOW_DEFAULT,
    GaussianBatches,
    LognormalBatches,
    PoissonArrivals,
    TraceBatches,
    WorkloadSpec,
    generate_stream,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3

T = TypeVar("T")
U = TypeVar("U")


def worker_count() -> int:
    """Parallel fan-out width; capped by the HETSERVE_THREADS env var."""
    env = os.environ.get("HETSERVE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParameterError(f"HETSERVE_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], U], items: Iterable[T]) -> list[U]:
    """Order-preserving map across worker processes (serial when width is 1)."""
    todo = list(items)
    workers = min(worker_count(), len(todo))
    if workers <= 1:
        return [fn(item) for item in todo]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, todo))


# ---------------------------------------------------------------------------
# Scenario files


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    catalog: tuple[InstanceTypeSpec, ...]
    qos: QoSSpec
    budget_per_hour: float
    workload: WorkloadSpec
    drs_threshold: int
    penalty_multiplier: float
    trial: SearchParams
    window_size: int
    settings: LatencySettings
    seed: int
    digest: str
    path: str


_REQUIRED = object()


def _take(mapping: dict, key: str, where: str, default=_REQUIRED):
    if key in mapping:
        return mapping.pop(key)
    if default is _REQUIRED:
        raise FormatError(f"{where}: missing required key {key!r}")
    return default


def _no_extras(mapping: dict, where: str) -> None:
    if mapping:
        raise FormatError(f"{where}: unknown keys {sorted(mapping)}")


def _parse_batch_dist(raw: dict, where: str, scenario_dir: Path):
    kind = _take(raw, "kind", where)
    if kind == "lognormal":
        dist = LognormalBatches(mu=float(_take(raw, "mu", where)),
                                sigma=float(_take(raw, "sigma", where)))
    elif kind == "gaussian":
        dist = GaussianBatches(mean=float(_take(raw, "mean", where)),
                               std=float(_take(raw, "std", where)))
    elif kind == "trace":
        path = Path(str(_take(raw, "path", where)))
        if not path.is_absolute():
            path = scenario_dir / path
        dist = TraceBatches(path=str(path))
    else:
        raise FormatError(f"{where}: unknown batch distribution kind {kind!r}")
    _no_extras(raw, where)
    return dist


def load_scenario(path: str | Path) -> Scenario:
    """Parse and validate a scenario file; raises FormatError with context."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read scenario file {path}: {exc}") from None
    digest = hashlib.sha256(blob).hexdigest()
    try:
        raw = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: scenario must be a JSON object")

    where = path.name
    name = str(_take(raw, "name", where))
    description = str(_take(raw, "description", where, ""))
    seed = int(_take(raw, "seed", where, 0))
    budget = float(_take(raw, "budget_per_hour", where))

    catalog = []
    for i, entry in enumerate(_take(raw, "instance_types", where)):
        sub = f"{where}:instance_types[{i}]"
        lat = _take(entry, "latency", sub)
        curve = LatencyCurve(
            intercept_ms=float(_take(lat, "intercept_ms", sub)),
            slope_ms_per_request=float(_take(lat, "slope_ms_per_request", sub)),
        )
        _no_extras(lat, sub)
        catalog.append(InstanceTypeSpec(
            type_id=int(_take(entry, "type_id", sub)),
            name=str(_take(entry, "name", sub)),
            price_per_hour=float(_take(entry, "price_per_hour", sub)),
            curve=curve,
            role=str(_take(entry, "role", sub)),
        ))
        _no_extras(entry, sub)
    if len({t.type_id for t in catalog}) != len(catalog):
        raise FormatError(f"{where}: duplicate type_id in instance_types")

    qraw = _take(raw, "qos", where)
    qos = QoSSpec(
        t_qos_ms=float(_take(qraw, "t_qos_ms", f"{where}:qos")),
        xi=float(_take(qraw, "xi", f"{where}:qos", 0.98)),
        percentile=float(_take(qraw, "percentile", f"{where}:qos", 99.0)),
    )
    _no_extras(qraw, f"{where}:qos")

    wraw = _take(raw, "workload", where)
    araw = _take(wraw, "arrival", f"{where}:workload")
    if _take(araw, "kind", f"{where}:workload.arrival") != "poisson":
        raise FormatError(f"{where}: only poisson arrivals are supported")
    arrival = PoissonArrivals(rate_qps=float(_take(araw, "rate_qps", f"{where}:workload.arrival")))
    _no_extras(araw, f"{where}:workload.arrival")
    batch_dist = _parse_batch_dist(_take(wraw, "batch_dist", f"{where}:workload"),
                                   f"{where}:workload.batch_dist", path.parent)
    workload = WorkloadSpec(
        arrival=arrival,
        batch_dist=batch_dist,
        num_queries=int(_take(wraw, "num_queries", f"{where}:workload")),
        seed=int(_take(wraw, "seed", f"{where}:workload")),
        max_batch=int(_take(wraw, "max_batch", f"{where}:workload", 1000)),
    )
    _no_extras(wraw, f"{where}:workload")

    praw = _take(raw, "policy_params", where, {})
    drs_threshold = int(_take(praw, "drs_threshold", f"{where}:policy_params", 0))
    penalty_multiplier = float(_take(praw, "penalty_multiplier", f"{where}:policy_params",
                                     PENALTY_MULTIPLIER_DEFAULT))
    _no_extras(praw, f"{where}:policy_params")

    traw = _take(raw, "trial_params", where, {})
    trial = SearchParams(
        trial_queries=int(_take(traw, "trial_queries", f"{where}:trial_params", 20_000)),
        resolution_qps=float(_take(traw, "resolution_qps", f"{where}:trial_params", 1.0)),
        start_rate_qps=float(_take(traw, "start_rate_qps", f"{where}:trial_params", 1.0)),
        max_rate_qps=float(_take(traw, "max_rate_qps", f"{where}:trial_params", 1_000_000.0)),
    )
    window_size = int(_take(traw, "window_size", f"{where}:trial_params", MONITOR_WINDOW_DEFAULT))
    _no_extras(traw, f"{where}:trial_params")

    nraw = _take(raw, "latency_noise", where, {})
    noise_enabled = bool(_take(nraw, "enabled", f"{where}:latency_noise", False))
    noise_std = float(_take(nraw, "std_fraction", f"{where}:latency_noise", 0.05))
    _no_extras(nraw, f"{where}:latency_noise")
    settings = LatencySettings(
        noise_std_fraction=noise_std if noise_enabled else None,
        max_batch=workload.max_batch,
    )

    _no_extras(raw, where)
    return Scenario(
        name=name, description=description, catalog=tuple(catalog), qos=qos,
        budget_per_hour=budget, workload=workload, drs_threshold=drs_threshold,
        penalty_multiplier=penalty_multiplier, trial=trial, window_size=window_size,
        settings=settings, seed=seed, digest=digest, path=str(path),
    )


def monitoring_window(scenario: Scenario):
    """Batch sizes standing in for the observed-traffic monitoring buffer."""
    spec = replace(
        scenario.workload,
        num_queries=scenario.window_size,
        seed=stable_seed(scenario.workload.seed, 0xB17C4),
    )
    import numpy as np

    return np.array([q.batch_size for q in generate_stream(spec)], dtype=np.int64)


def parse_config_counts(text: str, catalog: Sequence[InstanceTypeSpec]) -> HeterogeneousConfig:
    try:
        counts = [int(part) for part in text.split(",")]
    except ValueError:
        raise ParameterError(f"config must be comma-separated integers, got {text!r}") from None
    return make_config(catalog, counts)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _workload_echo(workload: WorkloadSpec) -> dict:
    dist = workload.batch_dist
    fields = {k: v for k, v in vars(dist).items()}
    return {
        "arrival": {"kind": "poisson", "rate_qps": workload.arrival.rate_qps},
        "batch_dist": fields,
        "num_queries": workload.num_queries,
        "seed": workload.seed,
        "max_batch": workload.max_batch,
    }


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(scenario: Scenario, config: HeterogeneousConfig, policy_name: str,
                 out: Path) -> dict:
    policy = make_policy(policy_name, drs_threshold=scenario.drs_threshold,
                         penalty_multiplier=scenario.penalty_multiplier)
    stream = generate_stream(scenario.workload)
    report = run(
        config, scenario.catalog, stream, policy, scenario.qos, scenario.settings,
        seed=stable_seed(scenario.seed, 0x51A1),
        offered_rate_qps=scenario.workload.arrival.rate_qps,
    )
    payload = {
        "scenario": scenario.name,
        "scenario_digest": scenario.digest,
        "config": list(config.counts),
        "workload": _workload_echo(scenario.workload),
        "report": {
            "offered_rate_qps": report.offered_rate_qps,
            "completed": report.completed,
            "qos_violations": report.qos_violations,
            "p99_latency_ms": report.p99_latency_ms,
            "achieved_goodput_qps": report.achieved_goodput_qps,
            "utilization": {str(tid): u for tid, u in report.utilization},
            "seed": report.seed,
            "policy": report.policy,
            "makespan_s": report.makespan_s,
        },
    }
    _write_json(out, payload)
    return payload


def plan_scenario(scenario: Scenario):
    configs = enumerate_configs(scenario.catalog, scenario.budget_per_hour)
    window = monitoring_window(scenario)
    profile = rate_profile(scenario.catalog, scenario.qos, window, scenario.workload.max_batch)
    table = build_upper_bound_table(configs, profile)
    chosen, rule = choose_config_detailed(table)
    return table, chosen, rule


def cmd_plan(scenario: Scenario, out_dir: Path) -> dict:
    table, chosen, rule = plan_scenario(scenario)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_table_csv(table, scenario.catalog, str(out_dir / "ub_table.csv"))
    ub_by_counts = {cfg.counts: qps for cfg, qps in table.entries}
    payload = {
        "scenario": scenario.name,
        "scenario_digest": scenario.digest,
        "workload": _workload_echo(scenario.workload),
        "budget_per_hour": scenario.budget_per_hour,
        "configs_considered": len(table),
        "chosen_config": list(chosen.counts),
        "chosen_cost_per_hour": chosen.cost_per_hour,
        "chosen_upper_bound_qps": ub_by_counts[chosen.counts],
        "rule": rule,
    }
    _write_json(out_dir / "plan.json", payload)
    return payload


def _config_seeds(scenario: Scenario, config: HeterogeneousConfig) -> tuple[int, int]:
    workload_seed = stable_seed(scenario.workload.seed, *config.counts)
    run_seed = stable_seed(scenario.seed, *config.counts)
    return workload_seed, run_seed


def simulation_evaluator(scenario: Scenario, policy_name: str = "kairos"):
    """Deterministic config -> allowable QPS evaluator used by the searchers."""
    def evaluate(config: HeterogeneousConfig) -> float:
        workload_seed, run_seed = _config_seeds(scenario, config)
        policy = make_policy(policy_name, drs_threshold=scenario.drs_threshold,
                             penalty_multiplier=scenario.penalty_multiplier)
        return allowable_throughput(
            config, scenario.catalog, policy,
            replace(scenario.workload, seed=workload_seed),
            scenario.qos, scenario.settings, scenario.trial, run_seed=run_seed,
        )
    return evaluate


def cmd_search(scenario: Scenario, algorithm: str, out_dir: Path) -> dict:
    if algorithm not in ("kairos_plus", "random"):
        raise ParameterError(f"unknown search algorithm {algorithm!r}")
    table, _, _ = plan_scenario(scenario)
    evaluator = simulation_evaluator(scenario)
    if algorithm == "kairos_plus":
        trace = kairos_plus(table, evaluator)
    else:
        trace = random_search([cfg for cfg, _ in table.entries], evaluator,
                              seed=scenario.seed, with_pruning=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_trace_csv(trace, str(out_dir / "search_trace.csv"))
    payload = {
        "scenario": scenario.name,
        "scenario_digest": scenario.digest,
        "algorithm": algorithm,
        "space_size": len(table),
        "evaluations_used": trace.evaluations_used,
        "pruned_by_bound": trace.pruned_by_bound,
        "pruned_as_subconfig": trace.pruned_as_subconfig,
        "best_config": list(trace.best_config.counts) if trace.best_config else None,
        "best_qps": trace.best_qps,
    }
    _write_json(out_dir / "search_summary.json", payload)
    return payload


def _compare_task(args) -> tuple[str, float, str]:
    scenario, config, policy_name = args
    workload_seed, run_seed = _config_seeds(scenario, config)
    template = replace(scenario.workload, seed=workload_seed)
    if policy_name == "drs":
        tuned = drs_tune_threshold(
            config, scenario.catalog, template, scenario.qos, scenario.settings,
            scenario.trial, run_seed=run_seed,
        )
        policy = make_policy("drs", drs_threshold=tuned.threshold)
        qps = allowable_throughput(config, scenario.catalog, policy, template,
                                   scenario.qos, scenario.settings, scenario.trial,
                                   run_seed=run_seed)
        return ("drs", qps, f"tuned_threshold={tuned.threshold}")
    policy = make_policy(policy_name, penalty_multiplier=scenario.penalty_multiplier)
    qps = allowable_throughput(config, scenario.catalog, policy, template,
                               scenario.qos, scenario.settings, scenario.trial,
                               run_seed=run_seed)
    return (policy_name, qps, "")


def cmd_compare(scenario: Scenario, config: HeterogeneousConfig | None, out: Path) -> list:
    if config is None:
        _, config, _ = plan_scenario(scenario)
    tasks = [(scenario, config, name) for name in ("kairos", "ribbon", "drs", "clkwrk")]
    rows = parallel_map(_compare_task, tasks)
    window = monitoring_window(scenario)
    oracle_qps = oracle_throughput(config, scenario.catalog, window, scenario.qos,
                                   scenario.workload.max_batch)
    rows.append(("oracle", oracle_qps, "analytic reference"))
    out.parent.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["policy", "allowable_qps", "note",
                         "config", "scenario", "scenario_digest"])
        for name, qps, note in rows:
            writer.writerow([name, f"{qps:.6f}", note,
                             ",".join(str(c) for c in config.counts),
                             scenario.name, scenario.digest])
    return rows


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetserve",
        description="Simulate and plan QoS-aware inference serving on heterogeneous pools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one simulation and write a JSON report")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--config", required=True,
                       help='instance counts per catalog type, e.g. "3,1,3"')
    p_sim.add_argument("--policy", required=True)
    p_sim.add_argument("--out", required=True)

    p_plan = sub.add_parser("plan", help="rank configurations by upper bound and pick one")
    p_plan.add_argument("--scenario", required=True)
    p_plan.add_argument("--out-dir", required=True)

    p_search = sub.add_parser("search", help="run a configuration search with online evaluation")
    p_search.add_argument("--scenario", required=True)
    p_search.add_argument("--algo", required=True, choices=["kairos_plus", "random"])
    p_search.add_argument("--out-dir", required=True)

    p_cmp = sub.add_parser("compare", help="compare dispatch policies on one configuration")
    p_cmp.add_argument("--scenario", required=True)
    p_cmp.add_argument("--config", default=None)
    p_cmp.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        scenario = load_scenario(args.scenario)
        if args.command == "simulate":
            config = parse_config_counts(args.config, scenario.catalog)
            cmd_simulate(scenario, config, args.policy, Path(args.out))
        elif args.command == "plan":
            cmd_plan(scenario, Path(args.out_dir))
        elif args.command == "search":
            cmd_search(scenario, args.algo, Path(args.out_dir))
        elif args.command == "compare":
            config = (parse_config_counts(args.config, scenario.catalog)
                      if args.config else None)
            cmd_compare(scenario, config, Path(args.out))
    except (FormatError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, StateError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except HetserveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
