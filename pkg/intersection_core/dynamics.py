"""Longitudinal double-integrator model of a vehicle on a fixed path.

The continuous-time position map is the exact zero-order-hold interpolant of
the discrete trajectory: quadratic inside each sampling interval and C1 across
stage boundaries. For a fixed time the position is affine in the controls,
which keeps the time-coupling constraints of the local problems linear.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import (
    InvalidParameterError,
    InvariantViolationError,
    OutOfHorizonError,
    UnreachableError,
)


TIME_TOLERANCE = 1e-9
MONOTONE_TOLERANCE = 1e-7

A_CONTINUOUS = np.array([[0.0, 1.0], [0.0, 0.0]])
B_CONTINUOUS = np.array([[0.0], [1.0]])


def discretize_zoh(sampling_time: float) -> tuple[np.ndarray, np.ndarray]:
    if not sampling_time > 0:
        raise InvalidParameterError(f"sampling time must be positive, got {sampling_time!r}")

    ts = float(sampling_time)
    a = np.array([[1.0, ts], [0.0, 1.0]])
    b = np.array([[0.5 * ts * ts], [ts]])
    return a, b


@dataclass(frozen=True)
class VehicleParams:
    sampling_time: float
    horizon: int
    u_lb: float
    u_ub: float
    q_weight: float
    r_weight: float
    v_desired: tuple[float, ...] | float
    p0: float
    v0: float
    p_in: float = 0.0
    p_out: float = 8.0
    name: str = ""
    a: np.ndarray = field(init=False, repr=False, compare=False)
    b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.sampling_time > 0:
            raise InvalidParameterError(f"sampling time must be positive, got {self.sampling_time!r}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidParameterError(f"horizon must be an integer >= 1, got {self.horizon!r}")
        if not self.u_lb < self.u_ub:
            raise InvalidParameterError(f"need u_lb < u_ub, got [{self.u_lb}, {self.u_ub}]")
        if not self.p_in < self.p_out:
            raise InvalidParameterError(f"need p_in < p_out, got [{self.p_in}, {self.p_out}]")
        if self.q_weight < 0:
            raise InvalidParameterError(f"Q must be nonnegative, got {self.q_weight}")
        if not self.r_weight > 0:
            raise InvalidParameterError(f"R must be positive, got {self.r_weight}")

        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "v_desired", _stage_profile(self.v_desired, self.horizon))
        a, b = discretize_zoh(self.sampling_time)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def horizon_end(self) -> float:
        return self.horizon * self.sampling_time

    @property
    def initial_state(self) -> np.ndarray:
        return np.array([self.p0, self.v0], dtype=float)


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    """States x_0..x_N and controls u_0..u_{N-1} of one vehicle."""

    sampling_time: float
    positions: np.ndarray
    velocities: np.ndarray
    controls: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def horizon_end(self) -> float:
        return self.horizon * self.sampling_time

    def is_consistent(self, tolerance: float = 1e-9) -> bool:
        a, b = discretize_zoh(self.sampling_time)
        states = np.column_stack([self.positions, self.velocities])
        predicted = states[:-1] @ a.T + np.outer(self.controls, b[:, 0])
        return bool(np.allclose(predicted, states[1:], atol=tolerance, rtol=0.0))


def simulate_controls(params: VehicleParams, controls: Sequence[float]) -> StateTrajectory:
    return rollout(params.initial_state, controls, params.sampling_time)


def rollout(x0: Sequence[float], controls: Sequence[float], sampling_time: float) -> StateTrajectory:
    a, b = discretize_zoh(sampling_time)
    u = np.asarray(controls, dtype=float)
    states = np.empty((len(u) + 1, 2))
    states[0] = np.asarray(x0, dtype=float)
    for k, u_k in enumerate(u):
        states[k + 1] = a @ states[k] + b[:, 0] * u_k
    return StateTrajectory(
        sampling_time=float(sampling_time),
        positions=states[:, 0].copy(),
        velocities=states[:, 1].copy(),
        controls=u.copy(),
    )


def stage_of(t: float, sampling_time: float, horizon: int) -> tuple[int, float]:
    """Stage index k and offset tau with t = k*T_s + tau, tau in [0, T_s]."""
    end = horizon * sampling_time
    if t < -TIME_TOLERANCE or t > end + TIME_TOLERANCE:
        raise OutOfHorizonError(f"time {t} outside horizon [0, {end}]")

    t = min(max(t, 0.0), end)
    k = min(int(math.floor(t / sampling_time)), horizon - 1)
    return k, t - k * sampling_time


def position_at(traj: StateTrajectory, t: float) -> float:
    k, tau = stage_of(t, traj.sampling_time, traj.horizon)
    return float(traj.positions[k] + traj.velocities[k] * tau + 0.5 * traj.controls[k] * tau * tau)


def position_time_derivative(traj: StateTrajectory, t: float) -> float:
    k, tau = stage_of(t, traj.sampling_time, traj.horizon)
    return float(traj.velocities[k] + traj.controls[k] * tau)


def crossing_time(traj: StateTrajectory, p_target: float) -> float:
    if np.any(traj.velocities < -MONOTONE_TOLERANCE):
        raise InvariantViolationError("trajectory is not monotone: negative velocity")

    positions = traj.positions
    if p_target < positions[0] - TIME_TOLERANCE or p_target > positions[-1] + TIME_TOLERANCE:
        raise UnreachableError(
            f"position {p_target} outside trajectory range [{positions[0]}, {positions[-1]}]"
        )
    if p_target <= positions[0]:
        return 0.0

    k = int(np.searchsorted(positions[1:], p_target, side="left"))
    k = min(k, traj.horizon - 1)
    distance = p_target - positions[k]
    tau = _first_root(traj.velocities[k], traj.controls[k], distance)
    return k * traj.sampling_time + min(max(tau, 0.0), traj.sampling_time)


def position_row(params: VehicleParams, t: float) -> tuple[np.ndarray, float]:
    """Coefficients (c, d) such that p(t, w) = c @ u + d for the controls u."""
    k, tau = stage_of(t, params.sampling_time, params.horizon)
    pred = prediction_matrices(params)
    row = pred.position[k] + tau * pred.velocity[k]
    row = row.copy()
    row[k] += 0.5 * tau * tau
    offset = pred.free_position[k] + tau * pred.free_velocity[k]
    return row, float(offset)


@dataclass(frozen=True, eq=False)
class PredictionMatrices:
    """Condensed map from controls to positions and velocities, stages 0..N."""

    position: np.ndarray
    velocity: np.ndarray
    free_position: np.ndarray
    free_velocity: np.ndarray


@lru_cache(maxsize=256)
def prediction_matrices(params: VehicleParams) -> PredictionMatrices:
    n = params.horizon
    a, b = params.a, params.b
    gamma = np.zeros((n + 1, 2, n))
    free = np.zeros((n + 1, 2))
    free[0] = params.initial_state
    for k in range(n):
        free[k + 1] = a @ free[k]
        gamma[k + 1] = a @ gamma[k]
        gamma[k + 1, :, k] += b[:, 0]
    for matrix in (gamma, free):
        matrix.setflags(write=False)
    return PredictionMatrices(
        position=gamma[:, 0, :],
        velocity=gamma[:, 1, :],
        free_position=free[:, 0],
        free_velocity=free[:, 1],
    )


def _first_root(velocity: float, accel: float, distance: float) -> float:
    # smallest nonnegative tau with v*tau + a*tau^2/2 = distance
    if distance <= 0.0:
        return 0.0
    discriminant = max(velocity * velocity + 2.0 * accel * distance, 0.0)
    denominator = velocity + math.sqrt(discriminant)
    if denominator <= 0.0:
        return math.inf
    return 2.0 * distance / denominator


def _stage_profile(profile: Sequence[float] | float, horizon: int) -> tuple[float, ...]:
    if np.ndim(profile) == 0:
        return (float(profile),) * (horizon + 1)

    values = tuple(float(v) for v in profile)
    if len(values) != horizon + 1:
        raise InvalidParameterError(
            f"desired speed profile needs {horizon + 1} stages, got {len(values)}"
        )
    return values
