"""Dense primal-dual interior-point solver for convex QPs and LPs.

Programs have the form

    minimize    0.5 x'Hx + g'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

and results follow the Lagrangian convention
L = f + y'(A_eq x - b_eq) + z'(A_in x - b_in) with z >= 0.

The iteration runs on a scaled copy of the program: the cost is divided by
its largest coefficient and every constraint row by its largest entry.
Multipliers are mapped back before they are returned.
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg

from .errors import InvalidParameterError


logger = logging.getLogger(__name__)

DEFAULT_KKT_TOLERANCE = 1e-8
DEFAULT_ACCEPTABLE_TOLERANCE = 1e-6
DEFAULT_MAX_ITERATIONS = 100
DEFAULT_LP_REGULARIZATION = 1e-10
DEFAULT_INFEASIBILITY_THRESHOLD = 1e-6
DEFAULT_STALL_ITERATIONS = 10
STEP_FRACTION = 0.99
KKT_REGULARIZATION = 1e-11
REFINEMENT_STEPS = 2
SYMMETRY_TOLERANCE = 1e-12


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class SolverTolerances:
    """Stopping rules, all measured on the scaled program.

    A point whose primal residual and complementarity meet ``kkt`` but whose
    dual residual only meets ``acceptable`` is reported optimal once the
    iteration stops making progress.
    """

    kkt: float = DEFAULT_KKT_TOLERANCE
    acceptable: float = DEFAULT_ACCEPTABLE_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    lp_regularization: float = DEFAULT_LP_REGULARIZATION
    infeasibility_threshold: float = DEFAULT_INFEASIBILITY_THRESHOLD
    stall_iterations: int = DEFAULT_STALL_ITERATIONS

    def __post_init__(self) -> None:
        if not self.kkt > 0:
            raise InvalidParameterError(f"KKT tolerance must be positive, got {self.kkt}")
        object.__setattr__(self, "acceptable", max(self.acceptable, self.kkt))
        if self.max_iterations < 1:
            raise InvalidParameterError(f"iteration cap must be >= 1, got {self.max_iterations}")
        if self.lp_regularization < 0:
            raise InvalidParameterError("LP regularization must be nonnegative")
        if self.stall_iterations < 1:
            raise InvalidParameterError("stall window must be >= 1")


@dataclass(frozen=True, eq=False)
class ConvexProgram:
    hessian: np.ndarray | None
    linear: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    is_lp: bool = field(init=False)

    def __post_init__(self) -> None:
        g = np.asarray(self.linear, dtype=float).reshape(-1)
        n = g.size
        hessian = np.zeros((n, n)) if self.hessian is None else np.asarray(self.hessian, dtype=float)
        a_eq, b_eq = _system(self.a_eq, self.b_eq, n, "equality")
        a_in, b_in = _system(self.a_in, self.b_in, n, "inequality")

        if hessian.shape != (n, n):
            raise InvalidParameterError(f"Hessian shape {hessian.shape} does not match {n} variables")
        if not np.allclose(hessian, hessian.T, atol=SYMMETRY_TOLERANCE, rtol=0.0):
            raise InvalidParameterError("Hessian is not symmetric")

        object.__setattr__(self, "linear", g)
        object.__setattr__(self, "hessian", hessian)
        object.__setattr__(self, "a_eq", a_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "a_in", a_in)
        object.__setattr__(self, "b_in", b_in)
        object.__setattr__(self, "is_lp", not np.any(hessian))

    @property
    def num_variables(self) -> int:
        return self.linear.size

    @property
    def num_equalities(self) -> int:
        return self.b_eq.size

    @property
    def num_inequalities(self) -> int:
        return self.b_in.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)

    def dual_objective(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> float:
        return float(-0.5 * x @ self.hessian @ x - self.b_eq @ y - self.b_in @ z)


@dataclass(frozen=True, eq=False)
class SolveResult:
    status: SolveStatus
    x: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    objective: float
    kkt_residual: float
    dual_objective: float
    primal_residual: float
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


def solve(program: ConvexProgram, tolerances: SolverTolerances | None = None) -> SolveResult:
    """Mehrotra predictor-corrector on the reduced KKT system."""
    tol = tolerances or SolverTolerances()
    n = program.num_variables

    hessian = program.hessian
    if program.is_lp and tol.lp_regularization > 0:
        hessian = hessian + tol.lp_regularization * np.eye(n)

    keep_eq = np.any(program.a_eq != 0.0, axis=1)
    keep_in = np.any(program.a_in != 0.0, axis=1)
    # a zero row is either void or impossible
    stray = max(
        _inf_norm(program.b_eq[~keep_eq]),
        max(0.0, -float(np.min(program.b_in[~keep_in], initial=0.0))),
    )
    if stray > tol.kkt * (1.0 + _inf_norm(program.b_eq) + _inf_norm(program.b_in)):
        return _infeasible_result(program, np.zeros(n), stray, 0)

    a_eq, b_eq = program.a_eq[keep_eq], program.b_eq[keep_eq]
    a_in, b_in = program.a_in[keep_in], program.b_in[keep_in]
    cost_scale = max(1.0, _inf_norm(program.linear), _inf_norm(hessian))
    eq_scale = np.max(np.abs(a_eq), axis=1) if a_eq.size else np.ones(0)
    in_scale = np.max(np.abs(a_in), axis=1) if a_in.size else np.ones(0)

    solver = _InteriorPoint(
        hessian / cost_scale,
        program.linear / cost_scale,
        a_eq / eq_scale[:, None],
        b_eq / eq_scale,
        a_in / in_scale[:, None],
        b_in / in_scale,
        tol,
    )
    status, iterations = solver.run()

    x = solver.x
    y = np.zeros(program.num_equalities)
    y[keep_eq] = cost_scale * solver.y / eq_scale
    z = np.zeros(program.num_inequalities)
    z[keep_in] = cost_scale * solver.z / in_scale
    result = SolveResult(
        status=status,
        x=x,
        eq_multipliers=y,
        ineq_multipliers=z,
        objective=program.objective(x),
        kkt_residual=solver.kkt_residual,
        dual_objective=program.dual_objective(x, y, z),
        primal_residual=solver.primal_residual,
        iterations=iterations,
    )
    if status is not SolveStatus.OPTIMAL:
        logger.debug(
            "convex solve ended with %s after %d iterations (primal %.3e, dual %.3e, gap %.3e)",
            status.value,
            iterations,
            solver.primal_residual,
            solver.dual_residual,
            solver.complementarity,
        )
    return result


class _InteriorPoint:
    def __init__(
        self,
        hessian: np.ndarray,
        linear: np.ndarray,
        a_eq: np.ndarray,
        b_eq: np.ndarray,
        a_in: np.ndarray,
        b_in: np.ndarray,
        tol: SolverTolerances,
    ) -> None:
        self.H, self.g = hessian, linear
        self.A, self.b = a_eq, b_eq
        self.G, self.h = a_in, b_in
        self.tol = tol
        self.n, self.p, self.m = linear.size, b_eq.size, b_in.size

        self.scale_d = 1.0 + _inf_norm(linear)
        self.scale_p = 1.0 + _inf_norm(b_eq)
        self.scale_g = 1.0 + _inf_norm(b_in)

        self.x = np.zeros(self.n)
        self.y = np.zeros(self.p)
        self.z = np.ones(self.m)
        self.s = np.ones(self.m)
        self.residuals = (np.zeros(self.n), np.zeros(self.p), np.zeros(self.m))
        self.kkt_residual = np.inf
        self.primal_residual = np.inf
        self.dual_residual = np.inf
        self.complementarity = np.inf

    def run(self) -> tuple[SolveStatus, int]:
        if not self._initial_point():
            return SolveStatus.INFEASIBLE, 0

        best_kkt = np.inf
        flat = 0
        for iteration in range(self.tol.max_iterations + 1):
            self._measure()
            if not np.isfinite(self.kkt_residual):
                self.primal_residual = np.inf
                return SolveStatus.INFEASIBLE, iteration
            if self.kkt_residual <= self.tol.kkt:
                return SolveStatus.OPTIMAL, iteration

            flat = flat + 1 if self.kkt_residual > 0.9 * best_kkt else 0
            best_kkt = min(best_kkt, self.kkt_residual)
            if flat >= self.tol.stall_iterations:
                return self._stalled(iteration)

            if iteration == self.tol.max_iterations:
                break
            if not self._step():
                return self._stalled(iteration)

        return self._stopped(self.tol.max_iterations)

    def _stopped(self, iteration: int) -> tuple[SolveStatus, int]:
        if self._acceptable():
            return SolveStatus.OPTIMAL, iteration
        return SolveStatus.MAX_ITERATIONS, iteration

    def _stalled(self, iteration: int) -> tuple[SolveStatus, int]:
        if self._acceptable():
            return SolveStatus.OPTIMAL, iteration
        if self.primal_residual > self.tol.infeasibility_threshold:
            return SolveStatus.INFEASIBLE, iteration
        return SolveStatus.MAX_ITERATIONS, iteration

    def _acceptable(self) -> bool:
        return (
            self.primal_residual <= self.tol.kkt
            and self.complementarity <= self.tol.kkt
            and self.dual_residual <= self.tol.acceptable
        )

    def _measure(self) -> None:
        r_d = self.H @ self.x + self.g + self.A.T @ self.y + self.G.T @ self.z
        r_p = self.A @ self.x - self.b
        r_g = self.G @ self.x + self.s - self.h
        self.residuals = (r_d, r_p, r_g)

        objective = float(0.5 * self.x @ self.H @ self.x + self.g @ self.x)
        self.primal_residual = max(_inf_norm(r_p) / self.scale_p, _inf_norm(r_g) / self.scale_g)
        self.dual_residual = _inf_norm(r_d) / (self.scale_d + _inf_norm(self.H @ self.x))
        self.complementarity = float(self.s @ self.z) / max(1.0, abs(objective))
        self.kkt_residual = max(self.dual_residual, self.primal_residual, self.complementarity)

    def _initial_point(self) -> bool:
        # least-squares start, then s and z shifted into the positive orthant
        solve_kkt = self._factor(np.ones(self.m))
        if solve_kkt is None:
            return False
        x, y = solve_kkt(-self.g + self.G.T @ self.h, self.b)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            return False

        self.x, self.y = x, y
        if self.m:
            slack = self.h - self.G @ x
            self.s = _shift_positive(slack)
            self.z = _shift_positive(-slack)
        return True

    def _step(self) -> bool:
        r_d, r_p, r_g = self.residuals
        if not self.m:
            solve_kkt = self._factor(np.zeros(0))
            if solve_kkt is None:
                return False
            dx, dy = solve_kkt(-r_d, -r_p)
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
                return False
            self.x, self.y = self.x + dx, self.y + dy
            return True

        s, z = self.s, self.z
        weight = z / s
        if not np.all(np.isfinite(weight)):
            return False
        solve_kkt = self._factor(weight)
        if solve_kkt is None:
            return False

        def direction(r_c: np.ndarray) -> tuple[np.ndarray, ...]:
            dx, dy = solve_kkt(-r_d - self.G.T @ (weight * r_g - r_c / s), -r_p)
            ds = -r_g - self.G @ dx
            dz = -(r_c + z * ds) / s
            return dx, dy, dz, ds

        mu = float(s @ z) / self.m
        dx, dy, dz, ds = direction(s * z)
        if not np.all(np.isfinite(np.concatenate([dx, dz, ds]))):
            return False
        alpha_aff = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha_aff * ds) @ (z + alpha_aff * dz)) / self.m
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0

        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        if not np.all(np.isfinite(np.concatenate([dx, dy, dz, ds]))):
            return False
        alpha = min(1.0, STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz)))

        s_next, z_next = s + alpha * ds, z + alpha * dz
        if not (np.all(s_next > 0) and np.all(z_next > 0)):
            return False
        self.x = self.x + alpha * dx
        self.y = self.y + alpha * dy
        self.s, self.z = s_next, z_next
        return True

    def _factor(self, weight: np.ndarray):
        """LU of the quasi-definite reduced system; None when it cannot be formed."""
        n, p = self.n, self.p
        kkt = np.zeros((n + p, n + p))
        kkt[:n, :n] = self.H + (self.G.T * weight) @ self.G
        kkt[:n, n:] = self.A.T
        kkt[n:, :n] = self.A
        if not np.all(np.isfinite(kkt)):
            return None

        regularized = kkt.copy()
        diagonal = np.arange(n + p)
        regularized[diagonal[:n], diagonal[:n]] += KKT_REGULARIZATION
        regularized[diagonal[n:], diagonal[n:]] -= KKT_REGULARIZATION
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            try:
                factors = linalg.lu_factor(regularized, check_finite=False)
            except (ValueError, linalg.LinAlgError):
                return None

        def solve_kkt(top: np.ndarray, bottom: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            rhs = np.concatenate([top, bottom])
            sol = linalg.lu_solve(factors, rhs, check_finite=False)
            residual = rhs - kkt @ sol
            size = _inf_norm(residual)
            for _ in range(REFINEMENT_STEPS):
                candidate = sol + linalg.lu_solve(factors, residual, check_finite=False)
                candidate_residual = rhs - kkt @ candidate
                candidate_size = _inf_norm(candidate_residual)
                if not candidate_size < 0.5 * size:
                    break
                sol, residual, size = candidate, candidate_residual, candidate_size
            return sol[:n], sol[n:]

        return solve_kkt


def _infeasible_result(program: ConvexProgram, x: np.ndarray, residual: float, iterations: int) -> SolveResult:
    return SolveResult(
        status=SolveStatus.INFEASIBLE,
        x=x,
        eq_multipliers=np.zeros(program.num_equalities),
        ineq_multipliers=np.zeros(program.num_inequalities),
        objective=program.objective(x),
        kkt_residual=np.inf,
        dual_objective=-np.inf,
        primal_residual=residual,
        iterations=iterations,
    )


def _system(matrix, rhs, n: int, label: str) -> tuple[np.ndarray, np.ndarray]:
    if matrix is None:
        return np.zeros((0, n)), np.zeros(0)

    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if matrix.size == 0:
        matrix = matrix.reshape(0, n)
    if matrix.shape != (rhs.size, n):
        raise InvalidParameterError(
            f"{label} system shape {matrix.shape} does not match {rhs.size} rows x {n} variables"
        )
    return matrix, rhs


def _shift_positive(vector: np.ndarray) -> np.ndarray:
    worst = float(np.max(-vector))
    if worst < -1e-8 * max(1.0, _inf_norm(vector)):
        return vector.copy()
    return vector + (1.0 + worst)


def _max_step(value: np.ndarray, delta: np.ndarray) -> float:
    negative = delta < 0
    if not np.any(negative):
        return np.inf
    return float(np.min(-value[negative] / delta[negative]))


def _inf_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(values))) if values.size else 0.0
