import math

import numpy as np
import pandas as pd
import pytest

from leverage_cycle_sim.analysis.stability import Regime, StochasticThreshold, critical_alpha
from leverage_cycle_sim.common.exceptions import BracketError, CalibrationError, DivergenceError, ParameterError
from leverage_cycle_sim.experiments import sweeps
from leverage_cycle_sim.experiments.calibration import CalibrationResult, PolicyEvaluation, TargetSpec
from leverage_cycle_sim.experiments.cell_runner import CellRunner, default_thread_count, seed_list
from leverage_cycle_sim.experiments.sweeps import (
    DEFAULT_B_GRID,
    SWEEP_COLUMNS,
    bifurcation_scan,
    delta_sweep,
    optimal_b,
    policy_sweep,
    stochastic_stability_scan,
    theta_sweep,
)
from leverage_cycle_sim.model.stochastic import GarchParams


@pytest.fixture
def fake_policy_cells(mocker):
    def calibrate(spec, params, garch):
        if spec.b > 0.4:
            raise CalibrationError("no model solution with the required output targets")
        return CalibrationResult(alpha=1.0 + spec.b, e_bar=2.0, mean_leverage=5.8, mean_r=0.27, iterations=3)

    def evaluate(params, garch, seeds, t_len, burn_in, q=None):
        b = params.policy.b
        return PolicyEvaluation(5.8, 0.27, 1.0 + (b - 0.1) ** 2, 0)

    mocker.patch.object(sweeps, "match_targets", side_effect=calibrate)
    mocker.patch.object(sweeps, "evaluate_policy", side_effect=evaluate)


def test_default_b_grid():
    assert len(DEFAULT_B_GRID) == 21
    assert DEFAULT_B_GRID[0] == -0.5
    assert DEFAULT_B_GRID[10] == 0.0
    assert DEFAULT_B_GRID[-1] == 0.5


def test_policy_sweep_normalizes_by_procyclical_row(fake_policy_cells, params):
    frame = policy_sweep([-0.5, 0.0, 0.1, 0.2, 0.5], TargetSpec(), params, GarchParams())
    assert tuple(frame.columns) == SWEEP_COLUMNS
    assert list(frame["status"]) == ["ok", "ok", "ok", "ok", "calibration_failed"]
    assert frame["rs_q_normalized"].iloc[0] == 1.0
    assert frame["rs_q_normalized"].iloc[2] == pytest.approx(1.0 / 1.36)
    assert math.isnan(frame["rs_q"].iloc[-1])
    assert optimal_b(frame) == pytest.approx(0.1)


def test_policy_sweep_without_reference_leaves_normalized_empty(fake_policy_cells, params):
    frame = policy_sweep([0.0, 0.2], TargetSpec(), params, GarchParams())
    assert frame["rs_q_normalized"].isna().all()
    assert frame["rs_q"].notna().all()


def test_policy_sweep_row_order_independent_of_threads(fake_policy_cells, params):
    grid = list(DEFAULT_B_GRID)
    serial = policy_sweep(grid, TargetSpec(), params, GarchParams(), runner=CellRunner(max_threads=1))
    threaded = policy_sweep(grid, TargetSpec(), params, GarchParams(), runner=CellRunner(max_threads=4))
    pd.testing.assert_frame_equal(serial, threaded)


def test_policy_sweep_rejects_out_of_range_b(params):
    with pytest.raises(ParameterError, match="outside"):
        policy_sweep([-0.6, 0.0], TargetSpec(), params, GarchParams())
    with pytest.raises(ParameterError, match="empty"):
        policy_sweep([], TargetSpec(), params, GarchParams())


def test_optimal_b_refines_with_a_parabola():
    b = np.linspace(-0.5, 0.5, 11)
    frame = pd.DataFrame({"b": b, "rs_q_normalized": (b - 0.13) ** 2 + 0.5, "status": "ok"})
    assert optimal_b(frame) == pytest.approx(0.13)


def test_optimal_b_ignores_failed_cells():
    frame = pd.DataFrame({"b": [-0.5, 0.0], "rs_q_normalized": [math.nan, 0.2],
                          "status": ["ok", "diverged"]})
    assert math.isnan(optimal_b(frame))


def test_bifurcation_scan_maps_leverage_axis(mocker, params):
    def regime(variant):
        if variant.policy.alpha > 0.05:
            raise DivergenceError("price left the live region")
        return Regime.STABLE

    mocker.patch.object(sweeps, "classify_regime", side_effect=regime)
    result = bifurcation_scan([-0.5], [10.0, 75.0], params, as_leverage=True)
    assert list(result.cells["alpha"]) == pytest.approx([0.01, 0.075])
    assert list(result.cells["lambda_star"]) == pytest.approx([10.0, 75.0])
    assert list(result.cells["regime"]) == ["Stable", "GloballyUnstable"]
    boundary = result.boundary.iloc[0]
    assert boundary["status"] == "ok"
    assert boundary["alpha_c"] == pytest.approx(critical_alpha(params, -0.5).alpha_c)


def test_bifurcation_boundary_without_bracket(mocker, params):
    mocker.patch.object(sweeps, "classify_regime", return_value=Regime.CYCLES)
    mocker.patch.object(sweeps, "critical_alpha", side_effect=BracketError("no stability crossing"))
    result = bifurcation_scan([0.0, 0.5], [0.1], params)
    assert list(result.boundary["status"]) == ["no_bracket", "no_bracket"]
    assert result.boundary["lambda_c"].isna().all()
    assert list(result.cells["regime"]) == ["Cycles", "Cycles"]


def test_bifurcation_scan_rejects_nonpositive_alpha(params):
    with pytest.raises(ParameterError):
        bifurcation_scan([-0.5], [0.0, 1.0], params)


def test_theta_sweep_at_table_speed_matches_critical_alpha(params):
    frame = theta_sweep([0.95], params)
    assert frame["theta"].iloc[0] == pytest.approx(9.5)
    assert frame["status"].iloc[0] == "ok"
    assert frame["lambda_c"].iloc[0] == pytest.approx(critical_alpha(params, -0.5).lambda_c)


def test_theta_sweep_rejects_negative_speed(params):
    with pytest.raises(ParameterError):
        theta_sweep([-1.0], params)


def test_stochastic_scan_only_for_procyclical_policies(params):
    with pytest.raises(ParameterError, match="outside"):
        stochastic_stability_scan([-0.5, 0.0], params, GarchParams(), [1])


def test_stochastic_scan_rows(mocker, params):
    threshold = StochasticThreshold(alpha_c=0.01, lambda_c=6.0, lambda_star_c=10.0, mean_target_leverage=8.0, b=-0.5,
                                    evaluations=7)
    mocker.patch.object(sweeps, "stochastic_critical_leverage", return_value=threshold)
    frame = stochastic_stability_scan([-0.5], params, GarchParams(), [1, 2])
    row = frame.iloc[0]
    assert row["status"] == "ok"
    assert row["stochastic_lambda_c"] == 6.0
    assert row["stochastic_lambda_star_c"] == 10.0
    assert row["mean_target_leverage"] == 8.0
    assert row["deterministic_lambda_c"] == pytest.approx(critical_alpha(params, -0.5).lambda_c)


def test_delta_sweep_statuses(small_bank):
    frame = delta_sweep([0.5, 30.0], small_bank, n_steps=600, burn_in=100)
    assert list(frame["status"]) == ["no_cycles", "invalid"]
    assert frame["t_delta"].iloc[0] == pytest.approx(small_bank.t_delta)
    assert math.isnan(frame["t_delta"].iloc[1])


def test_seed_list_is_deterministic():
    assert seed_list(1, 4) == [1, 0, 3, 2]
    assert seed_list(1, 2, offset=2) == [3, 2]


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("LEVERAGE_CYCLE_THREADS", "3")
    assert default_thread_count() == 3
    monkeypatch.setenv("LEVERAGE_CYCLE_THREADS", "many")
    assert default_thread_count(fallback=2) == 2
    monkeypatch.delenv("LEVERAGE_CYCLE_THREADS")
    assert default_thread_count() == 1


@pytest.mark.slow
def test_large_bank_cycle_period(params):
    frame = delta_sweep([0.5], params)
    assert frame["status"].iloc[0] == "ok"
    assert 12.0 <= frame["period"].iloc[0] <= 18.0


@pytest.mark.slow
def test_faster_adjustment_lowers_critical_leverage(params):
    frame = theta_sweep([0.5, 0.95, 1.5], params)
    assert (frame["status"] == "ok").all()
    assert frame["lambda_c"].is_monotonic_decreasing
    assert frame["r_c"].is_monotonic_decreasing


@pytest.mark.slow
def test_optimal_cyclicality_rises_with_bank_size(params):
    seeds = tuple(seed_list(1, 16))
    scenarios = [
        (GarchParams(a0=1e-3, a1=0.04, b1=0.95), 1e-5),
        (GarchParams(a0=1e-3, a1=0.016, b1=0.874), 0.1),
        (GarchParams(a0=1e-3, a1=0.016, b1=0.874), 0.27),
    ]
    optima = []
    for garch, r_hat in scenarios:
        spec = TargetSpec(lambda_hat=5.8, r_hat=r_hat, seeds=seeds)
        optima.append(optimal_b(policy_sweep(DEFAULT_B_GRID, spec, params, garch, runner=CellRunner(max_threads=8))))
    micro, mixed, macro = optima
    assert -0.5 <= micro <= -0.35
    assert -0.35 <= mixed <= -0.05
    assert -0.1 <= macro <= 0.1
    assert micro <= mixed <= macro
