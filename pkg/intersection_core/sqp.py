"""Central SQP over the in/out times of all vehicles.

The NLP is min sum_i V_i(t_i) s.t. h(T) >= 0, where h stacks four time-bound
rows per vehicle followed by one precedence row per consecutive pair in the
crossing order. Globalization is an l1-merit Armijo backtracking, either on
projected candidates or on the slack-relaxed local values.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import linalg

from .agent import AgentReply, InitialReport, LocalAgent, LocalEvaluation, TimeBounds, TimePair
from .convex import ConvexProgram, SolverTolerances, solve
from .errors import (
    InvalidParameterError,
    LinearizationInfeasibleError,
    LinesearchFailureError,
    NonDescentError,
    ProtocolError,
)
from .logs import format_log_line


logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.01
DEFAULT_BETA = 0.5
DEFAULT_TOLERANCE = 1e-2
DEFAULT_SIGMA = 1.0
DEFAULT_HESSIAN_FLOOR = 1e-6
DEFAULT_MAX_SQP_ITERS = 50
DEFAULT_MAX_LS_ITERS = 30
INITIAL_SHIFT_MARGIN = 1e-3
SLACK_TOLERANCE = 1e-6
ACTIVE_TOLERANCE = 1e-8
NEGLIGIBLE_STEP = 1e-10

ROWS_PER_VEHICLE = 4
ROW_LABELS = ("t_in_min", "t_in_max", "t_out_min", "t_out_max")

GLOBALIZATION_FAILURES = {
    LinearizationInfeasibleError: "linearization-infeasible",
    NonDescentError: "non-descent",
    LinesearchFailureError: "linesearch-failure",
}


class SQPMode(str, Enum):
    PROJECTION = "projection"
    RELAXATION = "relaxation"


@dataclass(frozen=True)
class SQPConfig:
    mode: SQPMode = SQPMode.PROJECTION
    gamma: float = DEFAULT_GAMMA
    beta: float = DEFAULT_BETA
    tolerance: float = DEFAULT_TOLERANCE
    sigma: float = DEFAULT_SIGMA
    rho: float | None = None
    hessian_floor: float = DEFAULT_HESSIAN_FLOOR
    max_sqp_iters: int = DEFAULT_MAX_SQP_ITERS
    max_ls_iters: int = DEFAULT_MAX_LS_ITERS

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SQPMode(self.mode))
        if not 0 < self.gamma <= 0.5:
            raise InvalidParameterError(f"gamma must lie in (0, 0.5], got {self.gamma}")
        if not 0 < self.beta < 1:
            raise InvalidParameterError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.tolerance > 0:
            raise InvalidParameterError(f"tolerance must be positive, got {self.tolerance}")
        if not self.sigma > 0:
            raise InvalidParameterError(f"sigma must be positive, got {self.sigma}")
        if not self.hessian_floor > 0:
            raise InvalidParameterError(f"Hessian floor must be positive, got {self.hessian_floor}")
        if self.rho is not None and not self.rho > 0:
            raise InvalidParameterError(f"rho must be positive, got {self.rho}")
        if self.max_sqp_iters < 1 or self.max_ls_iters < 1:
            raise InvalidParameterError("iteration limits must be >= 1")

    @property
    def projection(self) -> bool:
        return self.mode is SQPMode.PROJECTION


@dataclass(frozen=True)
class TimesVector:
    """Time pairs listed in crossing order."""

    order: tuple[int, ...]
    pairs: tuple[TimePair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.order:
            raise InvalidParameterError("need at least one vehicle")
        if len(self.order) != len(self.pairs):
            raise InvalidParameterError("order and time pairs differ in length")
        if len(set(self.order)) != len(self.order):
            raise InvalidParameterError(f"crossing order repeats a vehicle: {self.order}")

    def __len__(self) -> int:
        return len(self.pairs)

    def pair(self, vehicle: int) -> TimePair:
        return self.pairs[self.order.index(vehicle)]

    def as_array(self) -> np.ndarray:
        return np.array([[p.t_in, p.t_out] for p in self.pairs]).reshape(-1)

    @classmethod
    def from_array(cls, order: Sequence[int], values: np.ndarray) -> "TimesVector":
        values = np.asarray(values, dtype=float).reshape(-1, 2)
        return cls(tuple(order), tuple(TimePair(a, b) for a, b in values))

    @classmethod
    def from_mapping(cls, order: Sequence[int], pairs: Mapping[int, TimePair]) -> "TimesVector":
        return cls(tuple(order), tuple(pairs[v] for v in order))


@dataclass(frozen=True, eq=False)
class NlpData:
    times: TimesVector
    objective: float
    gradient: np.ndarray
    constraints: np.ndarray
    jacobian: np.ndarray
    blocks: tuple[np.ndarray | None, ...]
    labels: tuple[str, ...]
    slack_total: float = 0.0

    @property
    def violation(self) -> float:
        return float(np.sum(np.maximum(-self.constraints, 0.0)))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    residual: float
    step_norm: float
    alpha: float
    linesearch_trials: int
    mode: str
    regularized_blocks: int
    merit: float
    merit_trial: float
    slope: float
    sigma: float


@dataclass
class SQPState:
    times: TimesVector
    nlp: NlpData
    multipliers: np.ndarray
    sigma: float
    iteration: int = 0
    residual: float = float("inf")
    n_ls: int = 0
    regularizations: int = 0
    log: list[IterationRecord] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class CoordinationResult:
    converged: bool
    status: str
    mode: SQPMode
    times: TimesVector
    objective: float
    residual: float
    residual_history: tuple[float, ...]
    n_sqp: int
    n_ls: int
    regularizations: int
    multipliers: np.ndarray
    slack_total: float
    replies: Mapping[int, AgentReply]
    iterations: tuple[IterationRecord, ...]

    @property
    def trajectories(self) -> dict:
        return {v: reply.evaluation.trajectory for v, reply in self.replies.items()}


@dataclass(frozen=True, eq=False)
class LinesearchOutcome:
    alpha: float
    merit: float
    trials: int
    replies: Mapping[int, AgentReply]
    nlp: NlpData


class EvaluationBackend(Protocol):
    def initial_reports(self) -> dict[int, InitialReport]: ...

    def evaluate(self, times: TimesVector, *, relaxed: bool, project: bool) -> dict[int, AgentReply]: ...

    def broadcast(self, times: TimesVector, *, final: bool) -> None: ...


class LocalBackend:
    """Calls the agents in-process, in crossing order."""

    def __init__(self, agents: Mapping[int, LocalAgent]) -> None:
        self.agents = dict(agents)

    def initial_reports(self) -> dict[int, InitialReport]:
        return {v: agent.initial_report() for v, agent in self.agents.items()}

    def evaluate(self, times: TimesVector, *, relaxed: bool, project: bool) -> dict[int, AgentReply]:
        return {
            v: self.agents[v].respond(pair, relaxed=relaxed, project=project)
            for v, pair in zip(times.order, times.pairs)
        }

    def broadcast(self, times: TimesVector, *, final: bool) -> None:
        return None


def assemble_nlp(
    evaluations: Mapping[int, LocalEvaluation],
    bounds: Mapping[int, TimeBounds],
    order: Sequence[int],
) -> NlpData:
    missing = [v for v in order if v not in evaluations or v not in bounds]
    if missing:
        raise ProtocolError(f"no evaluation for vehicles {missing}")
    infeasible = [v for v in order if not evaluations[v].feasible]
    if infeasible:
        raise ProtocolError(f"infeasible evaluations for vehicles {infeasible}")

    n = len(order)
    rows = ROWS_PER_VEHICLE * n + n - 1
    grad = np.zeros(2 * n)
    h = np.zeros(rows)
    jac = np.zeros((rows, 2 * n))
    labels = []
    objective = slack_total = 0.0
    blocks = []

    for i, vehicle in enumerate(order):
        ev, b = evaluations[vehicle], bounds[vehicle]
        t_in, t_out = ev.times.t_in, ev.times.t_out
        col_in, col_out = 2 * i, 2 * i + 1
        r = ROWS_PER_VEHICLE * i

        objective += ev.value
        slack_total += sum(ev.slacks)
        grad[col_in : col_out + 1] = ev.gradient
        blocks.append(ev.hessian)

        h[r : r + 4] = (
            t_in - b.t_in_min,
            b.t_in_max - t_in,
            t_out - b.t_out_min,
            b.t_out_max - t_out,
        )
        jac[r, col_in] = 1.0
        jac[r + 1, col_in] = -1.0
        jac[r + 2, [col_in, col_out]] = (-b.slope_min, 1.0)
        jac[r + 3, [col_in, col_out]] = (b.slope_max, -1.0)
        labels.extend(f"{vehicle}:{label}" for label in ROW_LABELS)

    for i in range(n - 1):
        row = ROWS_PER_VEHICLE * n + i
        leader, follower = order[i], order[i + 1]
        h[row] = evaluations[follower].times.t_in - evaluations[leader].times.t_out
        jac[row, 2 * (i + 1)] = 1.0
        jac[row, 2 * i + 1] = -1.0
        labels.append(f"{leader}<{follower}")

    times = TimesVector.from_mapping(order, {v: evaluations[v].times for v in order})
    return NlpData(
        times=times,
        objective=objective,
        gradient=grad,
        constraints=h,
        jacobian=jac,
        blocks=tuple(blocks),
        labels=tuple(labels),
        slack_total=slack_total,
    )


def kkt_residual(nlp: NlpData, multipliers: np.ndarray) -> float:
    stationarity = nlp.gradient - nlp.jacobian.T @ multipliers
    violation = np.minimum(nlp.constraints, 0.0)
    return float(max(np.max(np.abs(stationarity)), np.max(np.abs(violation), initial=0.0)))


def active_constraints(nlp: NlpData) -> list[str]:
    return [label for label, value in zip(nlp.labels, nlp.constraints) if abs(value) <= ACTIVE_TOLERANCE]


def regularize_hessian(
    blocks: Sequence[np.ndarray | None], floor: float = DEFAULT_HESSIAN_FLOOR
) -> tuple[np.ndarray, int]:
    """Saturate eigenvalues of each 2x2 block at floor; missing blocks become floor*I."""
    regularized = []
    modified = 0
    for block in blocks:
        if block is None:
            regularized.append(floor * np.eye(2))
            modified += 1
            continue

        block = 0.5 * (np.asarray(block, dtype=float) + np.asarray(block, dtype=float).T)
        eigenvalues, vectors = linalg.eigh(block)
        if eigenvalues.min() >= floor:
            regularized.append(block)
            continue

        modified += 1
        regularized.append((vectors * np.maximum(eigenvalues, floor)) @ vectors.T)
    return linalg.block_diag(*regularized), modified


def solve_subproblem(
    nlp: NlpData,
    hessian: np.ndarray,
    tolerances: SolverTolerances | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    program = ConvexProgram(hessian, nlp.gradient, a_in=-nlp.jacobian, b_in=nlp.constraints)
    result = solve(program, tolerances)
    if not result.optimal:
        raise LinearizationInfeasibleError(
            f"QP subproblem ended with {result.status.value} "
            f"(primal residual {result.primal_residual:.3e}, active: {active_constraints(nlp)})"
        )
    return result.x, np.maximum(result.ineq_multipliers, 0.0)


def merit(objective: float, constraints: np.ndarray, sigma: float) -> float:
    return float(objective + sigma * np.sum(np.maximum(-np.asarray(constraints), 0.0)))


def merit_slope(gradient: np.ndarray, constraints: np.ndarray, sigma: float, step: np.ndarray) -> float:
    return float(gradient @ step - sigma * np.sum(np.maximum(-np.asarray(constraints), 0.0)))


def linesearch(
    times: TimesVector,
    step: np.ndarray,
    merit_value: float,
    slope: float,
    sigma: float,
    backend: EvaluationBackend,
    config: SQPConfig,
) -> LinesearchOutcome:
    """Armijo backtracking from alpha = 1, one evaluation round per trial."""
    base = times.as_array()
    alpha = 1.0
    history = []
    for trial in range(1, config.max_ls_iters + 1):
        candidate = TimesVector.from_array(times.order, base + alpha * step)
        replies = backend.evaluate(candidate, relaxed=not config.projection, project=config.projection)
        trial_merit = float("inf")
        nlp = None
        if all(reply.evaluation.feasible for reply in replies.values()):
            nlp = _assemble_from(replies, times.order)
            trial_merit = merit(nlp.objective, nlp.constraints, sigma)

        history.append((alpha, trial_merit))
        if nlp is not None and trial_merit <= merit_value + config.gamma * alpha * slope:
            return LinesearchOutcome(alpha=alpha, merit=trial_merit, trials=trial, replies=replies, nlp=nlp)
        alpha *= config.beta

    raise LinesearchFailureError(
        f"no sufficient decrease after {config.max_ls_iters} trials",
        {"merit": merit_value, "slope": slope, "sigma": sigma, "trials": history},
    )


def initial_times(
    reports: Mapping[int, InitialReport],
    order: Sequence[int],
    margin: float = INITIAL_SHIFT_MARGIN,
) -> TimesVector:
    """Free-flow times shifted so each vehicle enters after its predecessor exits.

    A shifted entry time outside the vehicle's window is replaced by the
    window midpoint.
    """
    pairs = []
    previous_out = -np.inf
    for vehicle in order:
        report = reports[vehicle]
        free = report.free_flow
        t_in = max(free.t_in, previous_out + margin)
        if not report.t_in_min <= t_in <= report.t_in_max:
            t_in = 0.5 * (report.t_in_min + report.t_in_max)
        pair = TimePair(t_in, t_in + (free.t_out - free.t_in))
        pairs.append(pair)
        previous_out = pair.t_out
    return TimesVector(tuple(order), tuple(pairs))


def coordinate(
    backend: EvaluationBackend,
    order: Sequence[int],
    config: SQPConfig | None = None,
    tolerances: SolverTolerances | None = None,
) -> CoordinationResult:
    """Run the SQP to convergence or to a failure status; never raises on non-convergence."""
    config = config or SQPConfig()
    order = tuple(order)
    relaxed = not config.projection

    reports = backend.initial_reports()
    start = initial_times(reports, order)
    replies = backend.evaluate(start, relaxed=relaxed, project=config.projection)
    infeasible = sorted(v for v, reply in replies.items() if not reply.evaluation.feasible)
    if infeasible:
        logger.warning("initial point infeasible for vehicles %s", infeasible)
        return _infeasible_start(config, start, replies)

    nlp = _assemble_from(replies, order)
    state = SQPState(
        times=nlp.times,
        nlp=nlp,
        multipliers=np.zeros(nlp.constraints.size),
        sigma=config.sigma,
    )
    history = []
    status = "max-iterations"

    while True:
        state.residual = kkt_residual(state.nlp, state.multipliers)
        history.append(state.residual)
        if state.residual <= config.tolerance:
            status = "converged" if state.nlp.slack_total <= SLACK_TOLERANCE else "slack-active"
            break
        if state.iteration >= config.max_sqp_iters:
            break

        try:
            accepted = _advance(state, backend, config, tolerances)
        except tuple(GLOBALIZATION_FAILURES) as exc:
            status = GLOBALIZATION_FAILURES[type(exc)]
            logger.warning("iteration %d: %s", state.iteration, exc)
            break
        if accepted is not None:
            replies = accepted
            backend.broadcast(state.times, final=False)

    converged = status == "converged"
    if converged:
        backend.broadcast(state.times, final=True)
    else:
        logger.warning("coordination stopped with status %s (residual %.3e)", status, state.residual)

    return CoordinationResult(
        converged=converged,
        status=status,
        mode=config.mode,
        times=state.times,
        objective=state.nlp.objective,
        residual=state.residual,
        residual_history=tuple(history),
        n_sqp=state.iteration,
        n_ls=state.n_ls,
        regularizations=state.regularizations,
        multipliers=state.multipliers,
        slack_total=state.nlp.slack_total,
        replies=dict(replies),
        iterations=tuple(state.log),
    )


def coordinate_local(
    agents: Mapping[int, LocalAgent],
    order: Sequence[int],
    config: SQPConfig | None = None,
) -> CoordinationResult:
    return coordinate(LocalBackend(agents), order, config)


def _advance(
    state: SQPState,
    backend: EvaluationBackend,
    config: SQPConfig,
    tolerances: SolverTolerances | None,
) -> Mapping[int, AgentReply] | None:
    """One SQP iteration on state; returns the accepted replies, None for a null step."""
    hessian, modified = regularize_hessian(state.nlp.blocks, config.hessian_floor)
    state.regularizations += modified
    step, mu_tilde = solve_subproblem(state.nlp, hessian, tolerances)

    bound = float(np.max(mu_tilde, initial=0.0))
    if state.sigma <= bound:
        state.sigma = 2.0 * bound
    current_merit = merit(state.nlp.objective, state.nlp.constraints, state.sigma)
    slope = merit_slope(state.nlp.gradient, state.nlp.constraints, state.sigma, step)
    step_norm = float(np.max(np.abs(step)))

    if step_norm <= NEGLIGIBLE_STEP:
        state.multipliers = mu_tilde
        state.iteration += 1
        record = _record(state, config, step_norm, 1.0, 0, modified, current_merit, current_merit, slope)
        state.log.append(record)
        logger.info(format_log_line("sqp", record))
        return None

    if slope >= 0:
        hessian = hessian + max(1.0, float(np.max(np.abs(hessian)))) * np.eye(hessian.shape[0])
        state.regularizations += 1
        step, mu_tilde = solve_subproblem(state.nlp, hessian, tolerances)
        state.sigma = max(state.sigma, 2.0 * float(np.max(mu_tilde, initial=0.0)))
        current_merit = merit(state.nlp.objective, state.nlp.constraints, state.sigma)
        slope = merit_slope(state.nlp.gradient, state.nlp.constraints, state.sigma, step)
        step_norm = float(np.max(np.abs(step)))
        if slope >= 0:
            raise NonDescentError(
                "SQP direction is not a descent direction of the merit function",
                {"iteration": state.iteration, "slope": slope, "sigma": state.sigma},
            )

    outcome = linesearch(state.times, step, current_merit, slope, state.sigma, backend, config)
    state.n_ls += outcome.trials
    state.times = outcome.nlp.times
    state.nlp = outcome.nlp
    state.multipliers = np.maximum(state.multipliers + outcome.alpha * (mu_tilde - state.multipliers), 0.0)
    state.iteration += 1

    record = _record(
        state, config, step_norm, outcome.alpha, outcome.trials, modified, current_merit, outcome.merit, slope
    )
    state.log.append(record)
    logger.info(format_log_line("sqp", record))
    return outcome.replies


def _infeasible_start(
    config: SQPConfig, start: TimesVector, replies: Mapping[int, AgentReply]
) -> CoordinationResult:
    return CoordinationResult(
        converged=False,
        status="infeasible-start",
        mode=config.mode,
        times=start,
        objective=float("inf"),
        residual=float("inf"),
        residual_history=(),
        n_sqp=0,
        n_ls=0,
        regularizations=0,
        multipliers=np.zeros(0),
        slack_total=0.0,
        replies=dict(replies),
        iterations=(),
    )


def _assemble_from(replies: Mapping[int, AgentReply], order: Sequence[int]) -> NlpData:
    evaluations = {v: reply.evaluation for v, reply in replies.items()}
    bounds = {v: reply.bounds for v, reply in replies.items()}
    return assemble_nlp(evaluations, bounds, order)


def _record(
    state: SQPState,
    config: SQPConfig,
    step_norm: float,
    alpha: float,
    trials: int,
    modified: int,
    merit_value: float,
    merit_trial: float,
    slope: float,
) -> IterationRecord:
    return IterationRecord(
        iteration=state.iteration,
        residual=state.residual,
        step_norm=step_norm,
        alpha=alpha,
        linesearch_trials=trials,
        mode=config.mode.value,
        regularized_blocks=modified,
        merit=merit_value,
        merit_trial=merit_trial,
        slope=slope,
        sigma=state.sigma,
    )
