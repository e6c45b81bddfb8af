from .agent import (
    EXACT,
    AgentReply,
    AgentSettings,
    InitialReport,
    LocalAgent,
    LocalEvaluation,
    LocalMode,
    TimeBounds,
    TimePair,
    build_local_qp,
    estimate_rho,
    evaluate,
    free_flow_times,
    gradient,
    hessian_block,
    project_times,
    time_bounds_in,
    time_bounds_out,
)
from .config import load_channel_config, load_sqp_config
from .convex import ConvexProgram, SolveResult, SolverTolerances, SolveStatus, solve
from .dynamics import (
    StateTrajectory,
    VehicleParams,
    crossing_time,
    discretize_zoh,
    position_at,
    position_time_derivative,
    rollout,
    simulate_controls,
)
from .errors import (
    BoundaryHessianError,
    IntersectionError,
    InvalidParameterError,
    InvariantViolationError,
    LinearizationInfeasibleError,
    LinesearchFailureError,
    NoFeasibleCrossingError,
    NonDescentError,
    OutOfHorizonError,
    ProtocolError,
    RoundFailureError,
    ScenarioError,
    UndefinedGradientError,
    UnreachableError,
)
from .logs import format_log_line, parse_log_line
from .runtime import (
    COORDINATOR,
    Channel,
    ChannelConfig,
    DistributedBackend,
    Fabric,
    Message,
    MessageKind,
    RoundStats,
    TraceEvent,
    dump_trace,
    transmit,
)
from .scenario import (
    TABLE_SCENARIOS,
    check_scenario,
    failed_row,
    format_table,
    load_scenario,
    summary_row,
    write_summary_csv,
    write_vehicle_csvs,
)
from .simulation import (
    OccupancyViolation,
    ScenarioConfig,
    SimulationResult,
    VehicleOutcome,
    build_agents,
    build_tracking_mpc,
    closed_loop,
    coordinate_scenario,
    occupancy_violations,
    plant_control,
    run_scenario,
    step_plant,
)
from .sqp import (
    CoordinationResult,
    LocalBackend,
    SQPConfig,
    SQPMode,
    TimesVector,
    assemble_nlp,
    coordinate,
    coordinate_local,
    initial_times,
    kkt_residual,
    linesearch,
    merit,
    merit_slope,
    regularize_hessian,
    solve_subproblem,
)

__all__ = [
    "COORDINATOR",
    "EXACT",
    "AgentReply",
    "AgentSettings",
    "BoundaryHessianError",
    "Channel",
    "ChannelConfig",
    "ConvexProgram",
    "CoordinationResult",
    "DistributedBackend",
    "Fabric",
    "InitialReport",
    "IntersectionError",
    "InvalidParameterError",
    "InvariantViolationError",
    "LinearizationInfeasibleError",
    "LinesearchFailureError",
    "LocalAgent",
    "LocalBackend",
    "LocalEvaluation",
    "LocalMode",
    "Message",
    "MessageKind",
    "NoFeasibleCrossingError",
    "NonDescentError",
    "OccupancyViolation",
    "OutOfHorizonError",
    "ProtocolError",
    "RoundFailureError",
    "RoundStats",
    "SQPConfig",
    "SQPMode",
    "ScenarioConfig",
    "ScenarioError",
    "SimulationResult",
    "SolveResult",
    "SolveStatus",
    "SolverTolerances",
    "StateTrajectory",
    "TABLE_SCENARIOS",
    "TimeBounds",
    "TimePair",
    "TimesVector",
    "TraceEvent",
    "UndefinedGradientError",
    "UnreachableError",
    "VehicleOutcome",
    "VehicleParams",
    "assemble_nlp",
    "build_agents",
    "build_local_qp",
    "build_tracking_mpc",
    "check_scenario",
    "closed_loop",
    "coordinate",
    "coordinate_local",
    "coordinate_scenario",
    "crossing_time",
    "discretize_zoh",
    "dump_trace",
    "estimate_rho",
    "evaluate",
    "failed_row",
    "format_log_line",
    "format_table",
    "free_flow_times",
    "gradient",
    "hessian_block",
    "initial_times",
    "kkt_residual",
    "linesearch",
    "load_channel_config",
    "load_scenario",
    "load_sqp_config",
    "merit",
    "merit_slope",
    "occupancy_violations",
    "parse_log_line",
    "plant_control",
    "position_at",
    "position_time_derivative",
    "project_times",
    "regularize_hessian",
    "rollout",
    "run_scenario",
    "simulate_controls",
    "solve",
    "solve_subproblem",
    "step_plant",
    "summary_row",
    "time_bounds_in",
    "time_bounds_out",
    "transmit",
    "write_summary_csv",
    "write_vehicle_csvs",
]
