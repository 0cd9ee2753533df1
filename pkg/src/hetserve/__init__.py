"""QoS-aware inference-serving simulator and heterogeneous pool planner."""

from .errors import (
    ConfigurationError,
    FormatError,
    HetserveError,
    ParameterError,
    SimulationInvariantError,
    StateError,
)
from .latency import (
    InstanceTypeSpec,
    LatencyCurve,
    LatencyPredictor,
    QoSSpec,
    heterogeneity_coefficients,
    qos_batch_limit,
    true_latency,
)
from .matcher import AssignmentPlan, CostMatrix, brute_force_solve, build_cost_matrix, solve
from .capacity import (
    RateProfile,
    UpperBoundTable,
    build_upper_bound_table,
    choose_config,
    enumerate_configs,
    rate_profile,
    upper_bound,
)
from .policies import drs_tune_threshold, make_policy, oracle_throughput
from .search import SearchTrace, kairos_plus, random_search
from .simkernel import (
    HeterogeneousConfig,
    LatencySettings,
    SearchParams,
    SimReport,
    allowable_throughput,
    make_config,
    qos_verdict,
    run,
    stable_seed,
)
from .workload import (
    BatchWindow,
    GaussianBatches,
    LognormalBatches,
    PoissonArrivals,
    Query,
    TraceBatches,
    WorkloadSpec,
    empirical_fraction_below,
    generate_stream,
    load_trace,
)

__version__ = "0.1.0"
