import logging
from unittest import mock

import numpy as np
import pytest

from conftest import toy_vehicle
from intersection_core import (
    EXACT,
    AgentReply,
    InitialReport,
    InvalidParameterError,
    LinearizationInfeasibleError,
    LinesearchFailureError,
    LocalAgent,
    LocalEvaluation,
    ProtocolError,
    SolveStatus,
    SQPConfig,
    SQPMode,
    TimeBounds,
    TimePair,
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
from intersection_core.logs import parse_log_line
from intersection_core.sqp import NlpData


def fake_evaluation(times, value=1.0, gradient=(0.0, 0.0), hessian=None, feasible=True):
    return LocalEvaluation(
        times=times,
        mode=EXACT,
        feasible=feasible,
        status=SolveStatus.OPTIMAL if feasible else SolveStatus.INFEASIBLE,
        value=value if feasible else None,
        gradient=np.asarray(gradient, dtype=float) if feasible else None,
        hessian=hessian,
    )


def wide_bounds(t_in, slope_min=0.0, slope_max=0.0):
    return TimeBounds(
        t_in_min=0.0, t_in_max=100.0, t_in=t_in, t_out_min=0.0, t_out_max=100.0,
        slope_min=slope_min, slope_max=slope_max,
    )


def fake_reply(vehicle, times, **kwargs):
    return AgentReply(
        vehicle=vehicle, times=times, bounds=wide_bounds(times.t_in), evaluation=fake_evaluation(times, **kwargs)
    )


class ScriptedBackend:
    """Single-vehicle backend whose value depends on the trial step length."""

    def __init__(self, base, values):
        self.base = base
        self.values = values
        self.calls = 0

    def initial_reports(self):
        return {}

    def evaluate(self, times, *, relaxed, project):
        self.calls += 1
        pair = times.pairs[0]
        alpha = round(pair.t_in - self.base.t_in, 12)
        return {1: fake_reply(1, pair, value=self.values.get(alpha, 11.0))}

    def broadcast(self, times, *, final):
        return None


class TestAssemble:
    def test_two_vehicle_layout(self):
        pairs = {1: TimePair(3.0, 3.8), 2: TimePair(3.9, 4.5)}
        evaluations = {v: fake_evaluation(p, value=float(v), gradient=(v, -v)) for v, p in pairs.items()}
        bounds = {v: wide_bounds(p.t_in) for v, p in pairs.items()}

        nlp = assemble_nlp(evaluations, bounds, (1, 2))

        assert nlp.constraints.shape == (9,)
        assert nlp.jacobian.shape == (9, 4)
        assert nlp.objective == pytest.approx(3.0)
        np.testing.assert_allclose(nlp.gradient, [1.0, -1.0, 2.0, -2.0])
        assert nlp.labels[-1] == "1<2"
        assert nlp.constraints[-1] == pytest.approx(0.1)
        np.testing.assert_array_equal(nlp.jacobian[-1], [0.0, -1.0, 1.0, 0.0])

    def test_precedence_labels_follow_crossing_order(self):
        order = (1, 2, 6, 3, 4, 5)
        pairs = {v: TimePair(float(i), i + 0.5) for i, v in enumerate(order)}
        evaluations = {v: fake_evaluation(p) for v, p in pairs.items()}
        bounds = {v: wide_bounds(p.t_in) for v, p in pairs.items()}

        nlp = assemble_nlp(evaluations, bounds, order)

        assert len(nlp.labels) == 4 * 6 + 5
        assert nlp.labels[-5:] == ("1<2", "2<6", "6<3", "3<4", "4<5")
        assert nlp.labels[:4] == ("1:t_in_min", "1:t_in_max", "1:t_out_min", "1:t_out_max")

    def test_out_bound_rows_carry_slopes(self):
        times = TimePair(3.0, 3.8)
        bounds = TimeBounds(
            t_in_min=2.0, t_in_max=4.0, t_in=3.0, t_out_min=3.5, t_out_max=4.5, slope_min=0.7, slope_max=0.2
        )
        nlp = assemble_nlp({1: fake_evaluation(times)}, {1: bounds}, (1,))

        np.testing.assert_allclose(nlp.constraints, [1.0, 1.0, 0.3, 0.7])
        np.testing.assert_allclose(nlp.jacobian, [[1.0, 0.0], [-1.0, 0.0], [-0.7, 1.0], [0.2, -1.0]])

    def test_missing_or_infeasible_vehicle_is_a_protocol_error(self):
        times = TimePair(3.0, 3.8)
        with pytest.raises(ProtocolError):
            assemble_nlp({1: fake_evaluation(times)}, {1: wide_bounds(3.0)}, (1, 2))
        with pytest.raises(ProtocolError):
            assemble_nlp({1: fake_evaluation(times, feasible=False)}, {1: wide_bounds(3.0)}, (1,))

    def test_kkt_residual_without_multipliers_is_gradient_norm(self):
        times = TimePair(3.0, 3.8)
        nlp = assemble_nlp({1: fake_evaluation(times, gradient=(0.25, -0.5))}, {1: wide_bounds(3.0)}, (1,))
        assert kkt_residual(nlp, np.zeros(4)) == pytest.approx(0.5)

    def test_kkt_residual_counts_violation(self):
        pairs = {1: TimePair(3.0, 3.8), 2: TimePair(3.5, 4.2)}
        evaluations = {v: fake_evaluation(p) for v, p in pairs.items()}
        bounds = {v: wide_bounds(p.t_in) for v, p in pairs.items()}
        nlp = assemble_nlp(evaluations, bounds, (1, 2))
        assert nlp.violation == pytest.approx(0.3)
        assert kkt_residual(nlp, np.zeros(9)) == pytest.approx(0.3)


class TestRegularization:
    def test_negative_eigenvalue_is_floored(self):
        hessian, modified = regularize_hessian([np.array([[1.0, 0.0], [0.0, -2.0]])])
        np.testing.assert_allclose(hessian, [[1.0, 0.0], [0.0, 1e-6]], atol=1e-12)
        assert modified == 1

    def test_indefinite_coupling(self):
        eps = 1e-6
        hessian, _ = regularize_hessian([np.array([[0.0, 1.0], [1.0, 0.0]])], eps)
        expected = 0.5 * np.array([[1.0 + eps, 1.0 - eps], [1.0 - eps, 1.0 + eps]])
        np.testing.assert_allclose(hessian, expected, atol=1e-12)

    def test_positive_definite_block_is_untouched(self):
        block = np.array([[4.0, 1.0], [1.0, 3.0]])
        hessian, modified = regularize_hessian([block, None])
        np.testing.assert_array_equal(hessian[:2, :2], block)
        np.testing.assert_allclose(hessian[2:, 2:], 1e-6 * np.eye(2))
        np.testing.assert_array_equal(hessian[:2, 2:], np.zeros((2, 2)))
        assert modified == 1

    def test_result_is_positive_definite(self):
        rng = np.random.default_rng(7)
        blocks = [rng.normal(size=(2, 2)) for _ in range(5)]
        hessian, _ = regularize_hessian(blocks, 1e-3)
        assert np.linalg.eigvalsh(hessian).min() >= 1e-3 - 1e-12


class TestSubproblem:
    def nlp(self, gradient):
        times = TimePair(50.0, 51.0)
        return assemble_nlp({1: fake_evaluation(times, gradient=gradient)}, {1: wide_bounds(50.0)}, (1,))

    def test_unconstrained_step_is_negative_gradient(self):
        step, multipliers = solve_subproblem(self.nlp((1.0, 1.0)), np.eye(2))
        np.testing.assert_allclose(step, [-1.0, -1.0], atol=1e-6)
        np.testing.assert_allclose(multipliers, 0.0, atol=1e-6)

    def test_zero_gradient_gives_zero_step(self):
        step, _ = solve_subproblem(self.nlp((0.0, 0.0)), np.eye(2))
        np.testing.assert_allclose(step, [0.0, 0.0], atol=1e-8)

    def test_active_precedence_row_gets_a_multiplier(self):
        pairs = {1: TimePair(3.0, 3.8), 2: TimePair(3.8, 4.4)}
        evaluations = {1: fake_evaluation(pairs[1], gradient=(0.0, -1.0)), 2: fake_evaluation(pairs[2], gradient=(1.0, 0.0))}
        bounds = {v: wide_bounds(p.t_in) for v, p in pairs.items()}
        nlp = assemble_nlp(evaluations, bounds, (1, 2))

        step, multipliers = solve_subproblem(nlp, np.eye(4))

        # vehicle 1 wants to leave later, vehicle 2 to enter earlier
        assert step[2] - step[1] == pytest.approx(0.0, abs=1e-6)
        assert multipliers[-1] == pytest.approx(1.0, abs=1e-5)

    def test_inconsistent_linearization(self):
        times = TimesVector((1,), (TimePair(1.0, 2.0),))
        nlp = NlpData(
            times=times,
            objective=0.0,
            gradient=np.zeros(2),
            constraints=np.array([-1.0, -1.0]),
            jacobian=np.array([[1.0, 0.0], [-1.0, 0.0]]),
            blocks=(None,),
            labels=("lo", "hi"),
        )
        with pytest.raises(LinearizationInfeasibleError):
            solve_subproblem(nlp, np.eye(2))


def test_merit_examples():
    assert merit(3.0, np.array([0.5, -0.2]), 10.0) == pytest.approx(5.0)
    slope = merit_slope(np.array([1.0, 2.0]), np.array([0.5, -0.2]), 10.0, np.array([1.0, -1.0]))
    assert slope == pytest.approx(-3.0)


class TestLinesearch:
    base = TimePair(1.0, 2.0)
    step = np.array([1.0, 1.0])

    def run(self, values, **config):
        backend = ScriptedBackend(self.base, values)
        times = TimesVector((1,), (self.base,))
        outcome = linesearch(times, self.step, 10.0, -10.0, 1.0, backend, SQPConfig(**config))
        return outcome, backend

    def test_full_step_accepted(self):
        outcome, backend = self.run({1.0: 9.0})
        assert outcome.alpha == 1.0
        assert outcome.trials == 1
        assert outcome.merit == pytest.approx(9.0)
        assert backend.calls == 1

    def test_backtracks_once(self):
        outcome, _ = self.run({1.0: 10.5, 0.5: 9.9})
        assert outcome.alpha == 0.5
        assert outcome.trials == 2
        assert outcome.nlp.times.pairs[0] == TimePair(1.5, 2.5)

    def test_barely_sufficient_decrease_is_accepted(self):
        outcome, _ = self.run({1.0: 9.95, 0.5: 9.949})
        assert outcome.alpha == 0.5

    def test_failure_carries_trial_history(self):
        with pytest.raises(LinesearchFailureError) as info:
            self.run({}, max_ls_iters=3)
        trials = info.value.diagnostics["trials"]
        assert [alpha for alpha, _ in trials] == [1.0, 0.5, 0.25]


class TestInitialTimes:
    def reports(self, t_in_max=5.0):
        return {
            1: InitialReport(vehicle=1, free_flow=TimePair(2.0, 3.0), t_in_min=1.0, t_in_max=5.0),
            2: InitialReport(vehicle=2, free_flow=TimePair(2.5, 3.2), t_in_min=1.0, t_in_max=t_in_max),
        }

    def test_follower_is_shifted_behind_leader(self):
        times = initial_times(self.reports(), (1, 2))
        assert times.pair(1) == TimePair(2.0, 3.0)
        assert times.pair(2).t_in == pytest.approx(3.001)
        assert times.pair(2).t_out == pytest.approx(3.701)

    def test_order_is_respected(self):
        times = initial_times(self.reports(), (2, 1))
        assert times.pair(2) == TimePair(2.5, 3.2)
        assert times.pair(1).t_in == pytest.approx(3.201)

    def test_shift_past_the_window_restarts_at_its_midpoint(self):
        times = initial_times(self.reports(t_in_max=2.8), (1, 2))
        assert times.pair(2).t_in == pytest.approx(1.9)
        assert times.pair(2).t_out == pytest.approx(2.6)

    def test_free_flow_before_the_window_restarts_at_its_midpoint(self):
        reports = {1: InitialReport(vehicle=1, free_flow=TimePair(0.5, 1.5), t_in_min=1.0, t_in_max=3.0)}
        times = initial_times(reports, (1,))
        assert times.pair(1) == TimePair(2.0, 3.0)


class TestConfig:
    def test_mode_accepts_strings(self):
        assert SQPConfig(mode="relaxation").mode is SQPMode.RELAXATION
        assert SQPConfig().projection

    @pytest.mark.parametrize(
        "overrides",
        [{"gamma": 0.0}, {"gamma": 0.6}, {"beta": 1.0}, {"tolerance": 0.0}, {"rho": -1.0}, {"max_sqp_iters": 0}],
    )
    def test_invalid_values(self, overrides):
        with pytest.raises(InvalidParameterError):
            SQPConfig(**overrides)

    def test_times_vector_rejects_repeated_vehicle(self):
        with pytest.raises(InvalidParameterError):
            TimesVector((1, 1), (TimePair(1.0, 2.0), TimePair(3.0, 4.0)))


def toy_agents():
    return {v: LocalAgent(v, toy_vehicle(v)) for v in (1, 2)}


def test_single_vehicle_converges_at_free_flow():
    agents = {1: LocalAgent(1, toy_vehicle(1))}
    result = coordinate_local(agents, (1,))

    assert result.converged
    assert result.n_sqp <= 2
    free = agents[1].initial_report().free_flow
    assert result.times.pair(1).t_in == pytest.approx(free.t_in, abs=1e-2)


@pytest.fixture(scope="module")
def toy_results():
    return {
        mode: coordinate_local(toy_agents(), (1, 2), SQPConfig(mode=mode))
        for mode in (SQPMode.PROJECTION, SQPMode.RELAXATION)
    }


@pytest.mark.parametrize("mode", list(SQPMode))
def test_toy_pair_converges_with_precedence(toy_results, mode):
    result = toy_results[mode]

    assert result.converged
    assert result.status == "converged"
    assert result.residual <= 1e-2
    assert result.times.pair(1).t_out <= result.times.pair(2).t_in + 1e-6
    assert result.objective > 0.0
    assert len(result.residual_history) == result.n_sqp + 1
    assert all(reply.evaluation.trajectory.is_consistent() for reply in result.replies.values())


def test_toy_modes_agree(toy_results):
    projection = toy_results[SQPMode.PROJECTION].times.as_array()
    relaxation = toy_results[SQPMode.RELAXATION].times.as_array()
    np.testing.assert_allclose(projection, relaxation, atol=1e-2)


def test_iterations_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="intersection_core.sqp"):
        result = coordinate_local(toy_agents(), (1, 2))

    records = [parse_log_line(m) for m in caplog.messages if m.startswith("[sqp]")]
    assert len(records) == result.n_sqp
    assert all(payload["mode"] == "projection" for _, payload in records)
    assert [payload["iteration"] for _, payload in records] == list(range(1, result.n_sqp + 1))


class SingleVehicleBackend:
    """One vehicle with fixed replies; records broadcasts."""

    def __init__(self, feasible=True, value=10.0, gradient=(1.0, 0.0)):
        self.feasible = feasible
        self.value = value
        self.gradient = gradient
        self.broadcasts = []

    def initial_reports(self):
        return {1: InitialReport(vehicle=1, free_flow=TimePair(2.0, 3.0), t_in_min=1.0, t_in_max=5.0)}

    def evaluate(self, times, *, relaxed, project):
        return {
            1: fake_reply(
                1, times.pairs[0], value=self.value, gradient=self.gradient, hessian=np.eye(2), feasible=self.feasible
            )
        }

    def broadcast(self, times, *, final):
        self.broadcasts.append(final)


class TestFailureStatuses:
    def test_infeasible_start_returns_partial_result(self):
        backend = SingleVehicleBackend(feasible=False)
        result = coordinate(backend, (1,))

        assert not result.converged
        assert result.status == "infeasible-start"
        assert result.n_sqp == 0
        assert result.residual == float("inf")
        assert result.times.pair(1) == TimePair(2.0, 3.0)
        assert not result.replies[1].evaluation.feasible
        assert backend.broadcasts == []

    def test_linesearch_failure_returns_partial_result(self, caplog):
        backend = SingleVehicleBackend()
        with caplog.at_level(logging.WARNING, logger="intersection_core.sqp"):
            result = coordinate(backend, (1,), SQPConfig(max_ls_iters=3))

        assert not result.converged
        assert result.status == "linesearch-failure"
        assert result.n_sqp == 0
        assert result.residual == pytest.approx(1.0)
        assert result.residual_history == (result.residual,)
        assert result.times.pair(1) == TimePair(2.0, 3.0)
        assert any("no sufficient decrease" in message for message in caplog.messages)

    def test_linearization_failure_returns_partial_result(self):
        backend = SingleVehicleBackend()
        error = LinearizationInfeasibleError("QP subproblem ended with infeasible")
        with mock.patch("intersection_core.sqp.solve_subproblem", side_effect=error):
            result = coordinate(backend, (1,))

        assert result.status == "linearization-infeasible"
        assert not result.converged
