"""Closed-loop validation of coordinated crossing times.

After coordination the assigned times are held fixed. Every vehicle then runs
a receding-horizon tracking MPC in which the entry and exit conditions are
inequalities p(t_in) <= p_in and p(t_out) >= p_out, softened with an exact
l1 penalty, and the first control of each solve drives the discrete plant.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .agent import AgentSettings, LocalAgent, TimePair, tracking_qp
from .convex import ConvexProgram, SolverTolerances, solve
from .dynamics import (
    StateTrajectory,
    VehicleParams,
    crossing_time,
    discretize_zoh,
    position_at,
    position_row,
)
from .errors import InvalidParameterError, InvariantViolationError, UnreachableError
from .logs import format_log_line
from .runtime import ChannelConfig, DistributedBackend, RoundStats
from .sqp import CoordinationResult, LocalBackend, SQPConfig, TimesVector, coordinate


logger = logging.getLogger(__name__)

OCCUPANCY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    vehicles: Mapping[int, VehicleParams]
    order: tuple[int, ...]
    sqp: SQPConfig = field(default_factory=SQPConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sim_steps: int | None = None
    noise_std: tuple[float, float] = (0.0, 0.0)
    noise_seed: int = 0
    penalty: float | None = None
    intersection_margin: float = 0.0
    distributed: bool = True
    description: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "vehicles", dict(self.vehicles))
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))
        if sorted(self.order) != sorted(self.vehicles):
            raise InvalidParameterError(
                f"crossing order {self.order} is not a permutation of vehicles {sorted(self.vehicles)}"
            )
        horizon = max(p.horizon for p in self.vehicles.values())
        if self.sim_steps is None:
            object.__setattr__(self, "sim_steps", horizon)
        if self.sim_steps < horizon:
            raise InvalidParameterError(f"simulation length {self.sim_steps} is shorter than the horizon {horizon}")
        if min(self.noise_std) < 0:
            raise InvalidParameterError("noise standard deviations must be nonnegative")
        if self.penalty is not None and not self.penalty > 0:
            raise InvalidParameterError(f"penalty must be positive, got {self.penalty}")
        if self.intersection_margin < 0:
            raise InvalidParameterError("intersection margin must be nonnegative")

    @property
    def sampling_time(self) -> float:
        return next(iter(self.vehicles.values())).sampling_time

    def coordination_params(self) -> dict[int, VehicleParams]:
        """Vehicle parameters with the intersection enlarged by the margin."""
        margin = self.intersection_margin
        if not margin:
            return dict(self.vehicles)
        return {
            v: replace(p, p_in=p.p_in - margin, p_out=p.p_out + margin, v_desired=p.v_desired)
            for v, p in self.vehicles.items()
        }


@dataclass(frozen=True, eq=False)
class VehicleOutcome:
    vehicle: int
    trajectory: StateTrajectory
    p_dev: np.ndarray
    assigned: TimePair
    realized_in: float | None
    realized_out: float | None
    planned_controls: np.ndarray
    position_error_in: float | None
    position_error_out: float | None
    mpc_failures: int = 0

    @property
    def delta_in(self) -> float | None:
        return None if self.realized_in is None else self.realized_in - self.assigned.t_in

    @property
    def delta_out(self) -> float | None:
        return None if self.realized_out is None else self.realized_out - self.assigned.t_out

    @property
    def times(self) -> np.ndarray:
        return self.trajectory.sampling_time * np.arange(self.trajectory.positions.size)


@dataclass(frozen=True)
class OccupancyViolation:
    step: int
    t: float
    vehicles: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    name: str
    coordination: CoordinationResult
    assigned: TimesVector
    vehicles: Mapping[int, VehicleOutcome]
    occupancy_violations: tuple[OccupancyViolation, ...]
    realized_order: tuple[int, ...]
    order_preserved: bool
    rounds: tuple[RoundStats, ...] = ()

    @property
    def mpc_failures(self) -> int:
        """Closed-loop samples driven by the braking fallback instead of an MPC solution."""
        return sum(o.mpc_failures for o in self.vehicles.values())

    @property
    def status(self) -> str:
        if not self.coordination.converged:
            return f"coordination-{self.coordination.status}"
        if self.mpc_failures:
            return "mpc-fallback"
        if self.occupancy_violations:
            return "occupancy-violated"
        if not self.order_preserved:
            return "order-changed"
        return "ok"

    @property
    def success(self) -> bool:
        return self.status == "ok"


def build_tracking_mpc(params: VehicleParams, times: TimePair, penalty: float | None) -> ConvexProgram:
    """Tracking QP with p(t_in) <= p_in and p(t_out) >= p_out.

    Times are relative to the initial state of params. A time outside
    [0, horizon] drops its row. penalty=None keeps both rows hard.
    """
    base = tracking_qp(params)
    n = params.horizon
    rows, rhs = [], []
    if 0.0 <= times.t_in <= params.horizon_end:
        c_in, d_in = position_row(params, times.t_in)
        rows.append(c_in)
        rhs.append(params.p_in - d_in)
    if 0.0 <= times.t_out <= params.horizon_end:
        c_out, d_out = position_row(params, times.t_out)
        rows.append(-c_out)
        rhs.append(d_out - params.p_out)

    if penalty is None:
        a_in = np.vstack([base.a_in, *rows]) if rows else base.a_in
        return ConvexProgram(base.hessian, base.linear, a_in=a_in, b_in=np.concatenate([base.b_in, rhs]))

    k = len(rows)
    hessian = np.zeros((n + k, n + k))
    hessian[:n, :n] = base.hessian
    linear = np.concatenate([base.linear, np.full(k, penalty)])
    a_in = np.zeros((base.num_inequalities + 2 * k, n + k))
    a_in[: base.num_inequalities, :n] = base.a_in
    for i, row in enumerate(rows):
        a_in[base.num_inequalities + i, :n] = row
        a_in[base.num_inequalities + i, n + i] = -1.0
        a_in[base.num_inequalities + k + i, n + i] = -1.0
    b_in = np.concatenate([base.b_in, rhs, np.zeros(k)])
    return ConvexProgram(hessian, linear, a_in=a_in, b_in=b_in)


def step_plant(
    x: Sequence[float],
    u: float,
    params: VehicleParams,
    noise_std: tuple[float, float] = (0.0, 0.0),
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one sample; returns (state, measurement)."""
    a, b = discretize_zoh(params.sampling_time)
    u = plant_control(x, u, params)
    state = a @ np.asarray(x, dtype=float) + b[:, 0] * u
    measurement = state.copy()
    if any(noise_std):
        rng = rng or np.random.default_rng()
        measurement = measurement + rng.normal(0.0, 1.0, size=2) * np.asarray(noise_std)
    return state, measurement


def plant_control(x: Sequence[float], u: float, params: VehicleParams) -> float:
    """Control the plant applies: within the bounds and never braking below v = 0."""
    standstill = -max(float(x[1]), 0.0) / params.sampling_time
    return min(max(float(u), params.u_lb, standstill), params.u_ub)


def build_agents(config: ScenarioConfig, tolerances: SolverTolerances | None = None) -> dict[int, LocalAgent]:
    settings = AgentSettings(rho=config.sqp.rho, tolerances=tolerances or SolverTolerances())
    return {v: LocalAgent(v, p, settings) for v, p in config.coordination_params().items()}


def coordinate_scenario(
    config: ScenarioConfig,
    tolerances: SolverTolerances | None = None,
    agents: Mapping[int, LocalAgent] | None = None,
) -> tuple[CoordinationResult, tuple[RoundStats, ...]]:
    """Coordination only, over the lossy fabric unless the scenario is local."""
    agents = agents if agents is not None else build_agents(config, tolerances)
    if config.distributed:
        backend = DistributedBackend([agents[v] for v in sorted(agents)], config.channel)
    else:
        backend = LocalBackend(agents)
    coordination = coordinate(backend, config.order, config.sqp, tolerances)
    return coordination, tuple(getattr(backend, "rounds", ()))


def run_scenario(
    config: ScenarioConfig,
    tolerances: SolverTolerances | None = None,
) -> SimulationResult:
    params = config.coordination_params()
    agents = build_agents(config, tolerances)
    coordination, rounds = coordinate_scenario(config, tolerances, agents)

    penalties = {v: config.penalty if config.penalty is not None else agents[v].rho for v in params}
    outcomes = closed_loop(params, coordination.times, penalties, config, tolerances)
    violations = occupancy_violations(outcomes, config.vehicles, config.sampling_time)

    entered = [(o.realized_in, v) for v, o in outcomes.items() if o.realized_in is not None]
    realized_order = tuple(v for _, v in sorted(entered))
    for vehicle, outcome in outcomes.items():
        logger.info(
            format_log_line(
                "sim",
                {
                    "scenario": config.name,
                    "vehicle": vehicle,
                    "assigned_in": outcome.assigned.t_in,
                    "assigned_out": outcome.assigned.t_out,
                    "realized_in": outcome.realized_in,
                    "realized_out": outcome.realized_out,
                    "delta_in": outcome.delta_in,
                    "delta_out": outcome.delta_out,
                },
            )
        )
    for violation in violations:
        logger.warning("scenario %s: occupancy violated at t=%.2f by %s", config.name, violation.t, violation.vehicles)

    result = SimulationResult(
        name=config.name,
        coordination=coordination,
        assigned=coordination.times,
        vehicles=outcomes,
        occupancy_violations=tuple(violations),
        realized_order=realized_order,
        order_preserved=realized_order == config.order,
        rounds=rounds,
    )
    if not result.success:
        logger.warning("scenario %s finished with status %s", config.name, result.status)
    return result


def closed_loop(
    params: Mapping[int, VehicleParams],
    assigned: TimesVector,
    penalties: Mapping[int, float | None],
    config: ScenarioConfig,
    tolerances: SolverTolerances | None = None,
) -> dict[int, VehicleOutcome]:
    """Vehicles step in lockstep; assigned times stay fixed for the whole run."""
    rng = np.random.default_rng(config.noise_seed)
    steps = config.sim_steps
    states = {v: np.empty((steps + 1, 2)) for v in params}
    controls = {v: np.zeros(steps) for v in params}
    measured = {v: p.initial_state for v, p in params.items()}
    planned = {}
    failures = dict.fromkeys(params, 0)
    for v, p in params.items():
        states[v][0] = p.initial_state

    for step in range(steps):
        for v in assigned.order:
            p = params[v]
            local = _shifted_params(p, step, steps, measured[v])
            times = assigned.pair(v).shifted(-step * p.sampling_time)
            result = solve(build_tracking_mpc(local, times, penalties[v]), tolerances)
            if result.optimal:
                u = float(result.x[0])
                if step == 0:
                    planned[v] = result.x[: local.horizon].copy()
            else:
                failures[v] += 1
                u = max(p.u_lb, -float(measured[v][1]) / p.sampling_time)
                logger.error("vehicle %d: tracking MPC %s at step %d, braking", v, result.status.value, step)
                if step == 0:
                    planned[v] = np.full(local.horizon, u)
            controls[v][step] = plant_control(states[v][step], u, p)

        for v in assigned.order:
            states[v][step + 1], measured[v] = step_plant(
                states[v][step], controls[v][step], params[v], config.noise_std, rng
            )

    outcomes = {}
    for v in assigned.order:
        p = params[v]
        trajectory = StateTrajectory(
            sampling_time=p.sampling_time,
            positions=states[v][:, 0].copy(),
            velocities=states[v][:, 1].copy(),
            controls=controls[v],
        )
        pair = assigned.pair(v)
        t = p.sampling_time * np.arange(steps + 1)
        outcomes[v] = VehicleOutcome(
            vehicle=v,
            trajectory=trajectory,
            p_dev=trajectory.positions - (p.p0 + p.v0 * t),
            assigned=pair,
            realized_in=_crossing_or_none(trajectory, p.p_in),
            realized_out=_crossing_or_none(trajectory, p.p_out),
            planned_controls=planned[v],
            position_error_in=_position_or_none(trajectory, pair.t_in, p.p_in),
            position_error_out=_position_or_none(trajectory, pair.t_out, p.p_out),
            mpc_failures=failures[v],
        )
    return outcomes


def occupancy_violations(
    outcomes: Mapping[int, VehicleOutcome],
    vehicles: Mapping[int, VehicleParams],
    sampling_time: float,
    tolerance: float = OCCUPANCY_TOLERANCE,
) -> list[OccupancyViolation]:
    """Samples at which more than one vehicle is strictly inside its (p_in, p_out)."""
    steps = min(o.trajectory.positions.size for o in outcomes.values())
    violations = []
    for k in range(steps):
        inside = tuple(
            v
            for v, o in outcomes.items()
            if vehicles[v].p_in + tolerance < o.trajectory.positions[k] < vehicles[v].p_out - tolerance
        )
        if len(inside) > 1:
            violations.append(OccupancyViolation(step=k, t=k * sampling_time, vehicles=inside))
    return violations


def _shifted_params(params: VehicleParams, step: int, steps: int, measurement: np.ndarray) -> VehicleParams:
    horizon = min(params.horizon, steps - step)
    profile = np.asarray(params.v_desired)
    stages = np.minimum(np.arange(step, step + horizon + 1), profile.size - 1)
    return replace(
        params,
        horizon=horizon,
        p0=float(measurement[0]),
        v0=float(measurement[1]),
        v_desired=tuple(profile[stages]),
    )


def _crossing_or_none(trajectory: StateTrajectory, position: float) -> float | None:
    try:
        return crossing_time(trajectory, position)
    except (UnreachableError, InvariantViolationError):
        return None


def _position_or_none(trajectory: StateTrajectory, t: float, target: float) -> float | None:
    if not 0.0 <= t <= trajectory.horizon_end:
        return None
    return position_at(trajectory, t) - target
