"""Probabilistic-automaton abstractions, bounded-time safety model checking,
and conservative runtime safety monitors, with a tank-farm case study."""

from .abstraction import (
    AbstractSystem,
    ErrorBin,
    ErrorModel,
    Grid,
    IntervalDynamics,
    abstract_dynamics,
    build_abstract_system,
    estimate_error_model,
    successor_cells,
)
from .metrics import (
    CalibrationReport,
    PredictionRecord,
    ReliabilityBin,
    brier,
    calibration_report,
    ece,
    ecce,
    reliability_bins,
    roc_auc,
    roc_curve,
)
from .model_check import (
    BoundedSafetyQuery,
    SafetyTable,
    brute_force_safety,
    check_bounded_safety,
    load_table,
    save_table,
)
from .monitor import (
    EstimatedStateDistribution,
    MonitorContext,
    SafetyEstimate,
    joint_from_independent,
    monitor_distribution,
    monitor_point,
    monitor_true,
)
from .pa import (
    CategoricalDistribution,
    ProbabilisticAutomaton,
    Transition,
    dump_transitions,
    make_point_distribution,
    parallel_compose,
    parse_transitions,
    product_distribution,
)
from .watertank import (
    FilterState,
    SystemState,
    TankBelief,
    TankParams,
    ThresholdArbiter,
    TrialStep,
    TrialTrace,
    control,
    default_grid,
    estimation_errors,
    filter_update,
    measurement_update,
    predict,
    run_trial,
    sense,
    step_dynamics,
    tank_error_models,
    tank_interval_dynamics,
    trial_seed,
    uniform_belief,
    write_trace_csv,
)

__version__ = "0.1.0"
