import math

import numpy as np
import pytest

from leverage_cycle_sim.common.exceptions import LeverageCycleError, ParameterError
from leverage_cycle_sim.model.core import (
    TRAJECTORY_COLUMNS,
    StatusTag,
    check_step_invariants,
    clearing_residual,
    default_initial_state,
    derived_quantities,
    fixed_point_state,
    map_vector,
    perturbed_fixed_point,
    policy_curve,
    policy_sensitivity,
    simulate,
    step,
    target_leverage,
)
from leverage_cycle_sim.model.params import ModelParams, PolicyParams, State, rescale_timestep


def test_target_leverage_constant_policy():
    assert target_leverage(0.7, PolicyParams(alpha=3.0, b=0.0)) == pytest.approx(3.0)


def test_target_leverage_table_values():
    policy = PolicyParams(alpha=0.075, sigma0_sq=1e-6, b=-0.5)
    assert target_leverage(0.0, policy) == pytest.approx(75.0)
    assert target_leverage(9.9e-5, policy) == pytest.approx(7.5)


@pytest.mark.parametrize("b", [-0.5, -0.2, 0.0, 0.3, 0.5])
def test_target_leverage_monotone_with_sign_of_b(b):
    grid = np.sort(np.random.default_rng(3).uniform(0.0, 1.0, 200))
    values = target_leverage(grid, PolicyParams(alpha=0.5, sigma0_sq=1e-3, b=b))
    steps = np.diff(values)
    assert np.all(values > 0)
    if b < 0:
        assert np.all(steps < 0)
    elif b > 0:
        assert np.all(steps > 0)
    else:
        assert np.all(steps == 0)


def test_policy_sensitivity_zero_for_constant_leverage():
    assert policy_sensitivity(0.3, PolicyParams(b=0.0)) == 0.0


def test_policy_sensitivity_at_zero_risk():
    policy = PolicyParams(alpha=1.0, sigma0_sq=1e-4, b=-0.5)
    assert policy_sensitivity(0.0, policy) == pytest.approx(-0.5 * 1e-4 ** -1.5)


@pytest.mark.parametrize("b", [-0.5, -0.1, 0.25])
def test_policy_sensitivity_matches_central_difference(b):
    policy = PolicyParams(alpha=0.075, sigma0_sq=1e-6, b=b)
    for sigma_sq in np.random.default_rng(11).uniform(1e-2, 1.0, 20):
        h = 1e-6 * sigma_sq
        numeric = (target_leverage(sigma_sq + h, policy) - target_leverage(sigma_sq - h, policy)) / (2 * h)
        assert policy_sensitivity(sigma_sq, policy) == pytest.approx(numeric, rel=1e-6)


def test_policy_curve_covers_each_cyclicality():
    curve = policy_curve([1e-4, 1e-2, 1.0], PolicyParams())
    assert len(curve) == 9
    assert sorted(curve["b"].unique()) == [-0.5, 0.0, 0.5]
    constant = curve[curve["b"] == 0.0]
    assert np.allclose(constant["target_leverage"], 0.075)


def test_policy_params_validation():
    with pytest.raises(ParameterError, match="alpha"):
        PolicyParams(alpha=-1.0)
    with pytest.raises(ParameterError, match="b must lie"):
        PolicyParams(b=0.6)


def test_model_params_validation():
    with pytest.raises(ParameterError, match="tau\\*delta"):
        ModelParams(delta=10.0)
    with pytest.raises(ParameterError, match="theta_minus"):
        ModelParams(theta_minus=-1.0)


def test_adjustment_and_equity_flow(params):
    state = State(sigma_sq=9.9e-5, w_f=0.5, p=25.0, n=0.12, l_b=8.0, p_lag=25.0)
    d = derived_quantities(state, params)
    assert d.a_b == pytest.approx(10.0)
    assert d.e_b == pytest.approx(2.0)
    assert d.lambda_bar == pytest.approx(7.5)
    assert d.delta_b == pytest.approx(4.75)
    assert d.kappa_b == pytest.approx(0.27)
    assert d.kappa_b + d.kappa_f == 0
    assert d.leverage == pytest.approx(5.0)
    assert d.r_size == pytest.approx(d.a_b / d.a_f)


def test_deleveraging_uses_theta_minus(params):
    state = State(sigma_sq=0.01, w_f=0.5, p=25.0, n=0.12, l_b=8.0, p_lag=25.0)
    symmetric = derived_quantities(state, params)
    slower = derived_quantities(state, params.with_changes(theta_minus=4.75))
    assert symmetric.delta_b < 0
    assert slower.delta_b == pytest.approx(symmetric.delta_b / 2)


def test_insolvent_state_has_undefined_leverage(params):
    d = derived_quantities(State(sigma_sq=0.0, w_f=0.5, p=25.0, n=0.12, l_b=12.0, p_lag=25.0), params)
    assert d.insolvent
    assert math.isnan(d.leverage)


def test_fixed_point_conditions(params):
    d = derived_quantities(fixed_point_state(params), params)
    assert d.delta_b == pytest.approx(0.0, abs=1e-9)
    assert d.kappa_b == pytest.approx(0.0, abs=1e-9)


def test_fixed_point_is_invariant_for_random_feasible_parameters():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        policy = PolicyParams(alpha=rng.uniform(0.05, 0.2), sigma0_sq=10 ** rng.uniform(-4, -2),
                              b=rng.uniform(-0.5, 0.5))
        w_b, mu = rng.uniform(0.2, 0.6), rng.uniform(5.0, 50.0)
        e_bar = rng.uniform(0.1, 0.9) * mu / (policy.leverage_cap * w_b)
        params = ModelParams(policy=policy, e_bar=e_bar, w_b=w_b, mu=mu, w_f0=rng.uniform(0.3, 0.7))
        x_star = fixed_point_state(params).as_array()
        image = map_vector(x_star, params)
        assert np.max(np.abs(image - x_star)) / np.max(np.abs(x_star)) < 1e-12


def test_variance_update_with_zero_return(params, balance_sheet_state):
    new_state, status = step(balance_sheet_state, params)
    assert status.tag is StatusTag.LIVE
    assert new_state.sigma_sq == pytest.approx(3.8e-4)
    assert new_state.p_lag == balance_sheet_state.p
    delta_b = derived_quantities(balance_sheet_state, params).delta_b
    assert new_state.l_b == pytest.approx(balance_sheet_state.l_b + delta_b)


def test_step_clears_the_market(params, balance_sheet_state):
    d = derived_quantities(balance_sheet_state, params)
    new_state, _ = step(balance_sheet_state, params, chi=0.05)
    assert clearing_residual(balance_sheet_state, new_state, params, d) == pytest.approx(0.0, abs=1e-9)
    check_step_invariants(balance_sheet_state, new_state, params, d)


def test_large_shock_clamps_fund_weight(params, balance_sheet_state):
    new_state, status = step(balance_sheet_state, params, chi=100.0)
    assert status.tag is StatusTag.CLAMPED
    assert status.clamp_count == 1
    assert new_state.w_f == pytest.approx(1.0 - 1e-6)


def test_nonpositive_clearing_denominator_diverges(params):
    state = State(sigma_sq=0.0, w_f=0.5, p=25.0, n=-3.0, l_b=0.0, p_lag=25.0)
    new_state, status = step(state, params)
    assert status.is_diverged
    assert "denominator" in status.reason
    assert new_state == state
    assert np.all(np.isnan(map_vector(state.as_array(), params)))

    trajectory = simulate(state, params, None, 10)
    assert trajectory.is_diverged
    assert trajectory.diverged_at == 0
    assert len(trajectory) == 0


def test_single_step_simulation_matches_step(params):
    initial = default_initial_state(params)
    trajectory = simulate(initial, params, None, 1)
    expected, _ = step(initial, params)
    assert len(trajectory) == 1
    assert np.array_equal(trajectory.states[0], expected.as_array())


def test_default_initial_state_perturbs_price(params):
    initial = default_initial_state(params)
    assert initial.p == pytest.approx(25.025)
    assert initial.p_lag == 25.0
    assert initial.sigma_sq == pytest.approx(1e-3)


def test_default_initial_state_holds_target_leverage(params):
    initial = default_initial_state(params, price_offset=0.0)
    d = derived_quantities(initial, params)
    assert d.lambda_bar == pytest.approx(0.075 / math.sqrt(1.001e-3), rel=1e-12)
    assert d.e_b == pytest.approx(params.e_bar, rel=1e-12)
    assert d.leverage == pytest.approx(d.lambda_bar, rel=1e-12)
    assert d.delta_b == pytest.approx(0.0, abs=1e-12)
    assert initial.n == pytest.approx(0.0645729, rel=1e-5)


def test_non_procyclical_start_sits_next_to_the_fixed_point(params):
    constant = params.with_policy(alpha=10.0, b=0.0)
    initial = default_initial_state(constant)
    x_star = fixed_point_state(constant)
    assert initial.sigma_sq == 0.0
    assert (initial.n, initial.l_b) == pytest.approx((x_star.n, x_star.l_b))


def test_default_initial_state_rejects_negative_risk(params):
    with pytest.raises(ParameterError):
        default_initial_state(params, sigma_sq=-1e-6)


def test_perturbed_fixed_point_moves_only_the_price(small_bank):
    start = perturbed_fixed_point(small_bank)
    x_star = fixed_point_state(small_bank)
    assert start.p == pytest.approx(small_bank.mu * (1 + 1e-8), rel=1e-15)
    assert (start.sigma_sq, start.n, start.l_b, start.p_lag) == (0.0, x_star.n, x_star.l_b, x_star.p_lag)


def test_default_parameters_stay_live(params):
    trajectory = simulate(default_initial_state(params), params, None, 5000)
    assert not trajectory.is_diverged
    assert len(trajectory) == 5000


def test_simulate_rejects_bad_arguments(params):
    with pytest.raises(ParameterError):
        simulate(default_initial_state(params), params, None, 0)
    with pytest.raises(ParameterError):
        simulate(State(0.0, 0.5, -1.0, 0.1, 1.0, 25.0), params, None, 5)


def test_invariants_hold_along_a_cycling_run(params):
    trajectory = simulate(default_initial_state(params), params, None, 2000, check_invariants=True)
    assert not trajectory.is_diverged
    assert len(trajectory) == 2000


def test_invariant_check_flags_broken_clearing(params, balance_sheet_state):
    d = derived_quantities(balance_sheet_state, params)
    new_state, _ = step(balance_sheet_state, params)
    tampered = State.from_array(new_state.as_array() * np.array([1, 1, 1.01, 1, 1, 1]))
    with pytest.raises(LeverageCycleError, match="clear"):
        check_step_invariants(balance_sheet_state, tampered, params, d)


def test_small_bank_converges_to_fundamental_value(small_bank):
    trajectory = simulate(default_initial_state(small_bank), small_bank, None, 2000)
    assert not trajectory.is_diverged
    assert abs(trajectory.prices[-1] - small_bank.mu) / small_bank.mu < 1e-6


def test_trajectory_frame_layout(params):
    trajectory = simulate(default_initial_state(params), params, None, 25)
    frame = trajectory.to_frame()
    assert tuple(frame.columns) == TRAJECTORY_COLUMNS
    assert len(frame) == 25
    assert frame["t_years"].iloc[0] == pytest.approx(0.1)
    assert set(frame["status"]) <= {"live", "clamped", "insolvent"}


def test_tail_keeps_absolute_time(params):
    trajectory = simulate(default_initial_state(params), params, None, 30)
    tail = trajectory.tail(10)
    assert len(tail) == 20
    assert tail.t_years[0] == pytest.approx(1.1)
    assert np.array_equal(tail.initial.as_array(), trajectory.states[9])


def test_from_states_rebuilds_derived_columns(params):
    trajectory = simulate(default_initial_state(params), params, None, 15)
    rebuilt = trajectory.from_states(trajectory.states, params, trajectory.initial)
    assert np.array_equal(rebuilt.columns["equity"], trajectory.columns["equity"])


def test_rescale_timestep_keeps_yearly_rates(params):
    halved = rescale_timestep(params, 0.05)
    assert halved.tau == 0.05
    assert (halved.delta, halved.theta, halved.eta, halved.rho) == (params.delta, params.theta, params.eta, params.rho)


def test_t_delta(params):
    assert params.t_delta == pytest.approx(-0.1 / math.log(0.95))


@pytest.mark.slow
def test_halving_the_time_step_barely_moves_the_price(params):
    coarse = simulate(default_initial_state(params), params, None, 100)
    fine_params = rescale_timestep(params, params.tau / 2)
    fine = simulate(default_initial_state(fine_params), fine_params, None, 200)
    assert fine.prices[-1] == pytest.approx(coarse.prices[-1], rel=0.05)


@pytest.mark.slow
def test_large_bank_keeps_oscillating(params):
    trajectory = simulate(default_initial_state(params), params, None, 3000).tail(1000)
    prices = trajectory.prices
    assert not trajectory.is_diverged
    assert (prices.max() - prices.min()) / params.mu > 0.05
