"""Per-vehicle computations: local MPC value, time bounds and sensitivities.

The local problem is condensed onto the control sequence u. States follow
from the prediction matrices, so the dynamics and initial condition never
appear as explicit rows. For fixed in/out times the time-coupling
constraints are linear rows in u.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np

from .convex import ConvexProgram, SolveStatus, SolverTolerances, solve
from .dynamics import (
    StateTrajectory,
    VehicleParams,
    crossing_time,
    position_row,
    position_time_derivative,
    prediction_matrices,
    simulate_controls,
)
from .errors import (
    BoundaryHessianError,
    InvalidParameterError,
    NoFeasibleCrossingError,
    OutOfHorizonError,
    UndefinedGradientError,
    UnreachableError,
)


logger = logging.getLogger(__name__)

DEFAULT_BOUND_MARGIN = 1e-3
DEFAULT_FD_STEP = 1e-4
DEFAULT_RHO_GRID = 5
DEFAULT_RHO_SAFETY = 10.0
DEFAULT_RHO_FLOOR = 1.0
BOUNDS_CACHE_SIZE = 256
BOUNDS_KEY_DIGITS = 12


@dataclass(frozen=True)
class TimePair:
    t_in: float
    t_out: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t_in) and math.isfinite(self.t_out)):
            raise InvalidParameterError(f"times must be finite, got ({self.t_in}, {self.t_out})")
        object.__setattr__(self, "t_in", float(self.t_in))
        object.__setattr__(self, "t_out", float(self.t_out))

    @property
    def is_ordered(self) -> bool:
        return self.t_in < self.t_out

    def shifted(self, delta: float) -> "TimePair":
        return TimePair(self.t_in + delta, self.t_out + delta)


@dataclass(frozen=True)
class LocalMode:
    relaxed: bool = False
    rho: float | None = None

    def __post_init__(self) -> None:
        if self.relaxed and (self.rho is None or not self.rho > 0):
            raise InvalidParameterError(f"relaxed mode needs a positive rho, got {self.rho!r}")

    @classmethod
    def exact(cls) -> "LocalMode":
        return cls()

    @classmethod
    def relaxation(cls, rho: float) -> "LocalMode":
        return cls(relaxed=True, rho=float(rho))

    @property
    def label(self) -> str:
        return "relaxed" if self.relaxed else "exact"


EXACT = LocalMode.exact()


@dataclass(frozen=True, eq=False)
class LocalEvaluation:
    times: TimePair
    mode: LocalMode
    feasible: bool
    status: SolveStatus
    value: float | None = None
    gradient: np.ndarray | None = None
    trajectory: StateTrajectory | None = None
    multipliers: tuple[float, float] = (0.0, 0.0)
    slacks: tuple[float, float] = (0.0, 0.0)
    hessian: np.ndarray | None = None


@dataclass(frozen=True)
class TimeBounds:
    """In-time bounds plus out-time bounds evaluated at one t_in.

    slope_min and slope_max are d t_out_min / d t_in and d t_out_max / d t_in.
    """

    t_in_min: float
    t_in_max: float
    t_in: float
    t_out_min: float
    t_out_max: float
    slope_min: float = 0.0
    slope_max: float = 0.0


@dataclass(frozen=True)
class AgentSettings:
    bound_margin: float = DEFAULT_BOUND_MARGIN
    fd_step: float = DEFAULT_FD_STEP
    hessian_step: float = DEFAULT_FD_STEP
    rho: float | None = None
    rho_grid: int = DEFAULT_RHO_GRID
    rho_safety: float = DEFAULT_RHO_SAFETY
    rho_floor: float = DEFAULT_RHO_FLOOR
    tolerances: SolverTolerances = field(default_factory=SolverTolerances)

    def __post_init__(self) -> None:
        if self.bound_margin < 0:
            raise InvalidParameterError("bound margin must be nonnegative")
        if not (self.fd_step > 0 and self.hessian_step > 0):
            raise InvalidParameterError("finite-difference steps must be positive")
        if self.rho is not None and not self.rho > 0:
            raise InvalidParameterError(f"rho must be positive, got {self.rho}")
        if self.rho_grid < 1:
            raise InvalidParameterError("rho grid needs at least one point per axis")


@dataclass(frozen=True, eq=False)
class AgentReply:
    vehicle: int
    times: TimePair
    bounds: TimeBounds
    evaluation: LocalEvaluation


@dataclass(frozen=True)
class InitialReport:
    vehicle: int
    free_flow: TimePair
    t_in_min: float
    t_in_max: float


def build_local_qp(params: VehicleParams, times: TimePair, mode: LocalMode = EXACT) -> ConvexProgram:
    """Condensed local MPC QP over u (plus s_1, s_2 when relaxed).

    Equality row 0 pins p(t_in) = p_in and row 1 pins p(t_out) = p_out.
    """
    base = tracking_qp(params)
    n = params.horizon
    c_in, d_in = position_row(params, times.t_in)
    c_out, d_out = position_row(params, times.t_out)
    a_eq = np.vstack([c_in, c_out])
    b_eq = np.array([params.p_in - d_in, params.p_out - d_out])

    if not mode.relaxed:
        return ConvexProgram(base.hessian, base.linear, a_eq, b_eq, base.a_in, base.b_in)

    hessian = np.zeros((n + 2, n + 2))
    hessian[:n, :n] = base.hessian
    linear = np.concatenate([base.linear, [mode.rho, mode.rho]])
    a_eq = np.hstack([a_eq, np.array([[0.0, 0.0], [1.0, -1.0]])])
    a_in = np.zeros((base.num_inequalities + 2, n + 2))
    a_in[: base.num_inequalities, :n] = base.a_in
    a_in[base.num_inequalities :, n:] = -np.eye(2)
    b_in = np.concatenate([base.b_in, [0.0, 0.0]])
    return ConvexProgram(hessian, linear, a_eq, b_eq, a_in, b_in)


def evaluate(
    params: VehicleParams,
    times: TimePair,
    mode: LocalMode = EXACT,
    tolerances: SolverTolerances | None = None,
) -> LocalEvaluation:
    program = build_local_qp(params, times, mode)
    result = solve(program, tolerances)
    if not result.optimal:
        return LocalEvaluation(times=times, mode=mode, feasible=False, status=result.status)

    n = params.horizon
    trajectory = simulate_controls(params, result.x[:n])
    slacks = (0.0, 0.0)
    value = tracking_cost(params, trajectory)
    if mode.relaxed:
        slacks = (max(float(result.x[n]), 0.0), max(float(result.x[n + 1]), 0.0))
        value += mode.rho * (slacks[0] + slacks[1])

    evaluation = LocalEvaluation(
        times=times,
        mode=mode,
        feasible=True,
        status=result.status,
        value=value,
        trajectory=trajectory,
        multipliers=(float(result.eq_multipliers[0]), float(result.eq_multipliers[1])),
        slacks=slacks,
    )
    return replace(evaluation, gradient=gradient(evaluation))


def tracking_cost(params: VehicleParams, trajectory: StateTrajectory) -> float:
    errors = trajectory.velocities - np.asarray(params.v_desired)
    return float(params.q_weight * errors @ errors + params.r_weight * trajectory.controls @ trajectory.controls)


def gradient(evaluation: LocalEvaluation) -> np.ndarray:
    """dV/dt = y * dp/dt at the optimal trajectory, per time-coupling row."""
    if not evaluation.feasible or evaluation.trajectory is None:
        raise UndefinedGradientError(f"value function undefined at {evaluation.times}")

    traj = evaluation.trajectory
    y_in, y_out = evaluation.multipliers
    return np.array(
        [
            y_in * position_time_derivative(traj, evaluation.times.t_in),
            y_out * position_time_derivative(traj, evaluation.times.t_out),
        ]
    )


def hessian_block(
    params: VehicleParams,
    times: TimePair,
    mode: LocalMode = EXACT,
    step: float = DEFAULT_FD_STEP,
    tolerances: SolverTolerances | None = None,
) -> np.ndarray:
    for h in (step, step / 10.0):
        columns = []
        for axis in range(2):
            plus = _perturbed(params, times, axis, h, mode, tolerances)
            minus = _perturbed(params, times, axis, -h, mode, tolerances)
            if plus is None or minus is None:
                break
            columns.append((plus.gradient - minus.gradient) / (2.0 * h))
        else:
            block = np.column_stack(columns)
            return 0.5 * (block + block.T)

    raise BoundaryHessianError(f"finite-difference stencil leaves the feasible set at {times}")


def time_bounds_in(params: VehicleParams, tolerances: SolverTolerances | None = None) -> tuple[float, float]:
    fastest = _extreme_trajectory(params, maximize=True, tolerances=tolerances)
    if fastest is None or fastest.positions[-1] < params.p_in:
        raise NoFeasibleCrossingError(
            f"vehicle {params.name or '?'} cannot reach p_in={params.p_in} within the horizon"
        )

    t_in_min = crossing_time(fastest, params.p_in)
    slowest = _extreme_trajectory(params, maximize=False, tolerances=tolerances)
    t_in_max = params.horizon_end
    if slowest is not None and slowest.positions[-1] >= params.p_in:
        t_in_max = crossing_time(slowest, params.p_in)
    return t_in_min, max(t_in_min, t_in_max)


def time_bounds_out(
    params: VehicleParams,
    t_in: float,
    tolerances: SolverTolerances | None = None,
) -> tuple[float, float]:
    fastest = _extreme_trajectory(params, maximize=True, t_in=t_in, tolerances=tolerances)
    if fastest is None:
        raise NoFeasibleCrossingError(f"t_in={t_in:.6f} is not reachable")
    if fastest.positions[-1] < params.p_out:
        raise NoFeasibleCrossingError(
            f"vehicle entering at t_in={t_in:.6f} cannot reach p_out={params.p_out} within the horizon"
        )

    t_out_min = crossing_time(fastest, params.p_out)
    slowest = _extreme_trajectory(params, maximize=False, t_in=t_in, tolerances=tolerances)
    t_out_max = params.horizon_end
    if slowest is not None and slowest.positions[-1] >= params.p_out:
        t_out_max = crossing_time(slowest, params.p_out)
    return t_out_min, max(t_out_min, t_out_max)


def project_times(times: TimePair, bounds: TimeBounds) -> TimePair:
    t_out = min(max(times.t_out, bounds.t_out_min), bounds.t_out_max)
    return TimePair(times.t_in, t_out)


def free_flow_times(params: VehicleParams, tolerances: SolverTolerances | None = None) -> TimePair:
    """Crossing times of the local MPC solved without time coupling."""
    result = solve(tracking_qp(params), tolerances)
    if not result.optimal:
        raise NoFeasibleCrossingError(f"free-flow problem ended with {result.status.value}")

    trajectory = simulate_controls(params, result.x)
    try:
        return TimePair(crossing_time(trajectory, params.p_in), crossing_time(trajectory, params.p_out))
    except UnreachableError as exc:
        raise NoFeasibleCrossingError(
            f"free-flow trajectory of vehicle {params.name or '?'} does not clear the intersection: {exc}"
        ) from exc


def estimate_rho(
    params: VehicleParams,
    grid: int = DEFAULT_RHO_GRID,
    safety: float = DEFAULT_RHO_SAFETY,
    floor: float = DEFAULT_RHO_FLOOR,
    tolerances: SolverTolerances | None = None,
) -> float:
    """Safety factor times the largest time-coupling multiplier on an interior grid."""
    fractions = np.linspace(0.1, 0.9, grid)
    t_in_min, t_in_max = time_bounds_in(params, tolerances)
    largest = 0.0
    for a in fractions:
        t_in = t_in_min + a * (t_in_max - t_in_min)
        try:
            t_out_min, t_out_max = time_bounds_out(params, t_in, tolerances)
        except NoFeasibleCrossingError:
            continue
        for b in fractions:
            t_out = t_out_min + b * (t_out_max - t_out_min)
            evaluation = evaluate(params, TimePair(t_in, t_out), EXACT, tolerances)
            if evaluation.feasible:
                largest = max(largest, *(abs(y) for y in evaluation.multipliers))

    rho = max(safety * largest, floor)
    logger.debug("estimated rho=%.4g for vehicle %s (max multiplier %.4g)", rho, params.name, largest)
    return rho


class LocalAgent:
    """One vehicle's node. Bound LPs are always solved before the local QP."""

    def __init__(self, vehicle: int, params: VehicleParams, settings: AgentSettings | None = None) -> None:
        self.vehicle = vehicle
        self.params = params
        self.settings = settings or AgentSettings()
        self._bounds = lru_cache(maxsize=BOUNDS_CACHE_SIZE)(self._compute_bounds)

    @cached_property
    def raw_in_bounds(self) -> tuple[float, float]:
        return time_bounds_in(self.params, self.settings.tolerances)

    @cached_property
    def in_bounds(self) -> tuple[float, float]:
        return _tighten(*self.raw_in_bounds, self.settings.bound_margin)

    @cached_property
    def rho(self) -> float:
        if self.settings.rho is not None:
            return self.settings.rho
        return estimate_rho(
            self.params,
            grid=self.settings.rho_grid,
            safety=self.settings.rho_safety,
            floor=self.settings.rho_floor,
            tolerances=self.settings.tolerances,
        )

    def mode(self, relaxed: bool) -> LocalMode:
        return LocalMode.relaxation(self.rho) if relaxed else EXACT

    def initial_report(self) -> InitialReport:
        t_in_min, t_in_max = self.in_bounds
        return InitialReport(
            vehicle=self.vehicle,
            free_flow=free_flow_times(self.params, self.settings.tolerances),
            t_in_min=t_in_min,
            t_in_max=t_in_max,
        )

    def bounds_at(self, t_in: float) -> TimeBounds:
        return self._bounds(round(float(t_in), BOUNDS_KEY_DIGITS))

    def bounds_cache_info(self):
        return self._bounds.cache_info()

    def _compute_bounds(self, t_in: float) -> TimeBounds:
        tol = self.settings.tolerances
        raw_lo, raw_hi = self.raw_in_bounds
        t_out_min, t_out_max = time_bounds_out(self.params, t_in, tol)

        lo = max(t_in - self.settings.fd_step, raw_lo)
        hi = min(t_in + self.settings.fd_step, raw_hi)
        slope_min = slope_max = 0.0
        if hi > lo:
            lower = _bounds_or_none(self.params, lo, tol) or (t_out_min, t_out_max)
            upper = _bounds_or_none(self.params, hi, tol) or (t_out_min, t_out_max)
            slope_min = (upper[0] - lower[0]) / (hi - lo)
            slope_max = (upper[1] - lower[1]) / (hi - lo)

        margin = self.settings.bound_margin
        out_lo, out_hi = _tighten(t_out_min, t_out_max, margin)
        return TimeBounds(
            t_in_min=self.in_bounds[0],
            t_in_max=self.in_bounds[1],
            t_in=t_in,
            t_out_min=out_lo,
            t_out_max=out_hi,
            slope_min=slope_min,
            slope_max=slope_max,
        )

    def respond(self, candidate: TimePair, *, relaxed: bool, project: bool) -> AgentReply:
        lo, hi = self.in_bounds
        t_in = round(min(max(candidate.t_in, lo), hi), BOUNDS_KEY_DIGITS)
        times = TimePair(t_in, min(max(candidate.t_out, 0.0), self.params.horizon_end))
        mode = self.mode(relaxed)
        try:
            bounds = self.bounds_at(t_in)
        except NoFeasibleCrossingError as exc:
            logger.warning("vehicle %d: %s", self.vehicle, exc)
            return _infeasible_reply(self.vehicle, times, mode, self.in_bounds)
        if project:
            times = project_times(times, bounds)

        tol = self.settings.tolerances
        evaluation = evaluate(self.params, times, mode, tol)
        if evaluation.feasible:
            try:
                block = hessian_block(self.params, times, mode, self.settings.hessian_step, tol)
                evaluation = replace(evaluation, hessian=block)
            except BoundaryHessianError as exc:
                logger.info("vehicle %d: %s", self.vehicle, exc)
        return AgentReply(vehicle=self.vehicle, times=times, bounds=bounds, evaluation=evaluation)


@lru_cache(maxsize=256)
def tracking_qp(params: VehicleParams) -> ConvexProgram:
    """Cost with bound and v >= 0 rows, no time coupling."""
    pred = prediction_matrices(params)
    n = params.horizon
    s_v = pred.velocity
    residual = pred.free_velocity - np.asarray(params.v_desired)

    hessian = 2.0 * (params.q_weight * s_v.T @ s_v + params.r_weight * np.eye(n))
    linear = 2.0 * params.q_weight * s_v.T @ residual
    a_in = np.vstack([np.eye(n), -np.eye(n), -s_v[1:]])
    b_in = np.concatenate([np.full(n, params.u_ub), np.full(n, -params.u_lb), pred.free_velocity[1:]])
    return ConvexProgram(0.5 * (hessian + hessian.T), linear, a_in=a_in, b_in=b_in)


def _extreme_trajectory(
    params: VehicleParams,
    *,
    maximize: bool,
    t_in: float | None = None,
    tolerances: SolverTolerances | None = None,
) -> StateTrajectory | None:
    base = tracking_qp(params)
    terminal = prediction_matrices(params).position[-1]
    a_eq = b_eq = None
    if t_in is not None:
        row, offset = position_row(params, t_in)
        a_eq, b_eq = row[None, :], np.array([params.p_in - offset])

    linear = -terminal if maximize else terminal
    result = solve(ConvexProgram(None, linear, a_eq, b_eq, base.a_in, base.b_in), tolerances)
    if result.status is not SolveStatus.OPTIMAL:
        return None
    controls = np.clip(result.x, params.u_lb, params.u_ub)
    return simulate_controls(params, controls)


def _perturbed(
    params: VehicleParams,
    times: TimePair,
    axis: int,
    h: float,
    mode: LocalMode,
    tolerances: SolverTolerances | None,
) -> LocalEvaluation | None:
    shifted = TimePair(times.t_in + (h if axis == 0 else 0.0), times.t_out + (h if axis == 1 else 0.0))
    try:
        evaluation = evaluate(params, shifted, mode, tolerances)
    except OutOfHorizonError:
        return None
    return evaluation if evaluation.feasible else None


def _bounds_or_none(params: VehicleParams, t_in: float, tolerances: SolverTolerances) -> tuple[float, float] | None:
    try:
        return time_bounds_out(params, t_in, tolerances)
    except NoFeasibleCrossingError:
        return None


def _tighten(lo: float, hi: float, margin: float) -> tuple[float, float]:
    if hi - lo <= 2.0 * margin:
        mid = 0.5 * (lo + hi)
        return mid, mid
    return lo + margin, hi - margin


def _infeasible_reply(vehicle: int, times: TimePair, mode: LocalMode, in_bounds: tuple[float, float]) -> AgentReply:
    # out bounds collapse onto the requested exit time when none can be computed
    bounds = TimeBounds(
        t_in_min=in_bounds[0],
        t_in_max=in_bounds[1],
        t_in=times.t_in,
        t_out_min=times.t_out,
        t_out_max=times.t_out,
    )
    evaluation = LocalEvaluation(times=times, mode=mode, feasible=False, status=SolveStatus.INFEASIBLE)
    return AgentReply(vehicle=vehicle, times=times, bounds=bounds, evaluation=evaluation)
