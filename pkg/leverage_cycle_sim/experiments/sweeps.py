"""Parameter sweeps emitting one table row per cell.

A failing cell never aborts a sweep; its row carries the failure in ``status``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import partial
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from leverage_cycle_sim.analysis.risk_metrics import cycle_period
from leverage_cycle_sim.analysis.stability import (
    Regime,
    classify_regime,
    critical_alpha,
    stochastic_critical_leverage,
)
from leverage_cycle_sim.common.exceptions import (
    BracketError,
    CalibrationError,
    InsufficientCyclesError,
    LeverageCycleError,
    ParameterError,
)
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.experiments.calibration import TargetSpec, evaluate_policy, match_targets
from leverage_cycle_sim.experiments.cell_runner import CellRunner
from leverage_cycle_sim.model.core import default_initial_state, simulate
from leverage_cycle_sim.model.params import ModelParams
from leverage_cycle_sim.model.stochastic import GarchParams

logger = get_logger(__name__)

REFERENCE_B = -0.5
DEFAULT_B_GRID = tuple(float(b) for b in np.round(np.linspace(-0.5, 0.5, 21), 10))
DEFAULT_THETA_TAU_GRID = (0.5, 0.95, 1.5)
DEFAULT_DELTA_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)

SWEEP_COLUMNS = ("b", "alpha", "e_bar", "mean_leverage", "mean_r", "rs_q", "rs_q_normalized", "status")
BIFURCATION_COLUMNS = ("b", "alpha", "lambda_star", "regime")
BOUNDARY_COLUMNS = ("b", "alpha_c", "lambda_c", "r_c", "status")
THETA_COLUMNS = ("theta_tau", "theta", "lambda_c", "r_c", "status")
STOCHASTIC_COLUMNS = ("b", "deterministic_lambda_c", "stochastic_lambda_c", "stochastic_lambda_star_c",
                      "mean_target_leverage", "status")
DELTA_COLUMNS = ("delta", "t_delta", "period", "status")


@dataclass(frozen=True)
class SweepRow:
    b: float
    alpha: float = math.nan
    e_bar: float = math.nan
    mean_leverage: float = math.nan
    mean_r: float = math.nan
    rs_q: float = math.nan
    rs_q_normalized: float = math.nan
    status: str = "ok"


@dataclass(frozen=True)
class BifurcationResult:
    cells: pd.DataFrame
    boundary: pd.DataFrame


def _check_grid(name: str, grid: Sequence[float], low: float, high: float, include_high: bool = True) -> None:
    if len(grid) == 0:
        raise ParameterError(f"{name} grid is empty")
    outside = [v for v in grid if not (low <= v <= high if include_high else low <= v < high)]
    if outside:
        bracket = "]" if include_high else ")"
        raise ParameterError(f"{name} values outside [{low}, {high}{bracket}: {outside}")


def _frame(rows, columns) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) if isinstance(r, SweepRow) else r for r in rows], columns=list(columns))


def _policy_cell(b: float, spec: TargetSpec, params: ModelParams, garch: Optional[GarchParams], q: float) -> SweepRow:
    try:
        result = match_targets(replace(spec, b=b), params, garch)
    except CalibrationError as e:
        logger.warning(f"Policy cell b={b}: {str(e)}")
        return SweepRow(b=b, status="calibration_failed")

    calibrated = params.with_changes(b=b, alpha=result.alpha, e_bar=result.e_bar)
    evaluation = evaluate_policy(calibrated, garch, spec.seeds, spec.t_len, spec.burn_in, q)
    if evaluation.diverged:
        status = "diverged"
    elif evaluation.invalid_returns:
        status = "invalid_returns"
    else:
        status = "ok"
    return SweepRow(
        b=b, alpha=result.alpha, e_bar=result.e_bar, mean_leverage=evaluation.mean_leverage,
        mean_r=evaluation.mean_r, rs_q=evaluation.rs_q, status=status,
    )


def policy_sweep(b_grid: Sequence[float], spec: TargetSpec, params: ModelParams, garch: Optional[GarchParams],
                 q: float = 0.05, runner: Optional[CellRunner] = None) -> pd.DataFrame:
    """Calibrate, simulate and score every cyclicality b; RS_q is normalized by the b = -0.5 row.

    Every cell uses the seed list of ``spec`` so that policies are compared under common noise.
    """
    _check_grid("b", b_grid, -0.5, 0.5)
    runner = runner or CellRunner(label="policy cells")
    rows = runner.map(partial(_policy_cell, spec=spec, params=params, garch=garch, q=q), list(b_grid))

    reference = next((r for r in rows if math.isclose(r.b, REFERENCE_B) and r.status == "ok"), None)
    if reference is None or not reference.rs_q > 0:
        logger.warning("No usable b = -0.5 reference row; normalized RS left empty")
    else:
        rows = [replace(r, rs_q_normalized=r.rs_q / reference.rs_q) for r in rows]
    return _frame(rows, SWEEP_COLUMNS)


def optimal_b(frame: pd.DataFrame, column: str = "rs_q_normalized") -> float:
    """argmin of ``column`` over b, refined by a quadratic through the three lowest grid points."""
    usable = frame[(frame["status"] == "ok") & np.isfinite(frame[column])]
    if usable.empty:
        return math.nan
    lowest = usable.nsmallest(3, column)
    best = float(lowest["b"].iloc[0])
    if len(lowest) < 3 or lowest["b"].nunique() < 3:
        return best
    curvature, slope, _ = np.polyfit(lowest["b"], lowest[column], 2)
    if curvature <= 0:
        return best
    vertex = -slope / (2.0 * curvature)
    return float(np.clip(vertex, lowest["b"].min(), lowest["b"].max()))


def _regime_cell(cell, params: ModelParams, as_leverage: bool) -> dict:
    b, value = cell
    variant = params.with_policy(b=b)
    alpha = value * variant.policy.sigma0_sq ** (-b) if as_leverage else value
    try:
        variant = variant.with_policy(alpha=alpha)
        regime = classify_regime(variant)
    except LeverageCycleError as e:
        logger.debug(f"Bifurcation cell b={b}, alpha={alpha}: {str(e)}")
        regime = Regime.GLOBALLY_UNSTABLE
    return {"b": b, "alpha": alpha, "lambda_star": variant.policy.leverage_cap, "regime": regime.value}


def _boundary_cell(b: float, params: ModelParams) -> dict:
    try:
        point = critical_alpha(params, b)
    except BracketError as e:
        logger.warning(f"Critical line b={b}: {str(e)}")
        return {"b": b, "alpha_c": math.nan, "lambda_c": math.nan, "r_c": math.nan, "status": "no_bracket"}
    return {"b": b, "alpha_c": point.alpha_c, "lambda_c": point.lambda_c, "r_c": point.r_c, "status": "ok"}


def bifurcation_scan(b_grid: Sequence[float], alpha_grid: Sequence[float], params: ModelParams,
                     as_leverage: bool = False, runner: Optional[CellRunner] = None) -> BifurcationResult:
    """Deterministic regime over a (b, alpha) grid, plus the critical line lambda*_c(b).

    With ``as_leverage`` the second axis holds fixed-point leverage values lambda* and is
    converted per b to alpha = lambda* sigma0^(-2b).
    """
    _check_grid("b", b_grid, -0.5, 0.5)
    if len(alpha_grid) == 0 or min(alpha_grid) <= 0:
        raise ParameterError("alpha grid must be nonempty and positive")
    runner = runner or CellRunner(label="regime cells")
    cells = [(float(b), float(a)) for b in b_grid for a in alpha_grid]
    rows = runner.map(partial(_regime_cell, params=params, as_leverage=as_leverage), cells)
    boundary = runner.map(partial(_boundary_cell, params=params), [float(b) for b in b_grid])
    return BifurcationResult(cells=_frame(rows, BIFURCATION_COLUMNS), boundary=_frame(boundary, BOUNDARY_COLUMNS))


def _theta_cell(theta_tau: float, params: ModelParams) -> dict:
    theta = theta_tau / params.tau
    row = {"theta_tau": theta_tau, "theta": theta, "lambda_c": math.nan, "r_c": math.nan}
    try:
        point = critical_alpha(params.with_changes(theta=theta), params.policy.b)
    except BracketError as e:
        logger.warning(f"theta_tau={theta_tau}: {str(e)}")
        return {**row, "status": "no_bracket"}
    return {**row, "lambda_c": point.lambda_c, "r_c": point.r_c, "status": "ok"}


def theta_sweep(theta_tau_grid: Sequence[float], params: ModelParams,
                runner: Optional[CellRunner] = None) -> pd.DataFrame:
    """Critical leverage and critical relative size against the adjustment speed theta * tau."""
    if len(theta_tau_grid) == 0 or min(theta_tau_grid) < 0:
        raise ParameterError("theta_tau grid must be nonempty and nonnegative")
    runner = runner or CellRunner(label="theta cells")
    rows = runner.map(partial(_theta_cell, params=params), [float(v) for v in theta_tau_grid])
    return _frame(rows, THETA_COLUMNS)


def _stochastic_cell(b: float, params: ModelParams, garch: Optional[GarchParams], seeds: Sequence[int],
                     n_steps: int, burn_in: int) -> dict:
    row = {"b": b, "deterministic_lambda_c": math.nan, "stochastic_lambda_c": math.nan,
           "stochastic_lambda_star_c": math.nan, "mean_target_leverage": math.nan}
    try:
        row["deterministic_lambda_c"] = critical_alpha(params, b).lambda_c
        threshold = stochastic_critical_leverage(params, b, seeds, garch, n_steps=n_steps, burn_in=burn_in)
    except BracketError as e:
        logger.warning(f"Stochastic stability b={b}: {str(e)}")
        return {**row, "status": "no_bracket"}
    row["stochastic_lambda_c"] = threshold.lambda_c
    row["stochastic_lambda_star_c"] = threshold.lambda_star_c
    row["mean_target_leverage"] = threshold.mean_target_leverage
    return {**row, "status": "ok"}


def stochastic_stability_scan(b_grid: Sequence[float], params: ModelParams, garch: Optional[GarchParams],
                              seeds: Sequence[int], n_steps: int = 10_000, burn_in: int = 1_000,
                              runner: Optional[CellRunner] = None) -> pd.DataFrame:
    """Deterministic against noise-driven stability thresholds for procyclical policies."""
    _check_grid("b", b_grid, -0.5, 0.0, include_high=False)
    runner = runner or CellRunner(label="stochastic stability cells")
    cell = partial(_stochastic_cell, params=params, garch=garch, seeds=list(seeds), n_steps=n_steps, burn_in=burn_in)
    return _frame(runner.map(cell, [float(b) for b in b_grid]), STOCHASTIC_COLUMNS)


def _delta_cell(delta: float, params: ModelParams, n_steps: int, burn_in: int) -> dict:
    try:
        variant = params.with_changes(delta=delta)
    except ParameterError as e:
        logger.warning(f"delta={delta}: {str(e)}")
        return {"delta": delta, "t_delta": math.nan, "period": math.nan, "status": "invalid"}
    row = {"delta": delta, "t_delta": variant.t_delta, "period": math.nan}
    trajectory = simulate(default_initial_state(variant), variant, None, burn_in + n_steps)
    if trajectory.is_diverged:
        return {**row, "status": "diverged"}
    try:
        row["period"] = cycle_period(trajectory.tail(burn_in).prices, variant.tau)
    except InsufficientCyclesError:
        return {**row, "status": "no_cycles"}
    return {**row, "status": "ok"}


def delta_sweep(delta_grid: Sequence[float], params: ModelParams, n_steps: int = 5_000, burn_in: int = 500,
                runner: Optional[CellRunner] = None) -> pd.DataFrame:
    """Deterministic cycle period against the volatility memory delta."""
    if len(delta_grid) == 0:
        raise ParameterError("delta grid is empty")
    runner = runner or CellRunner(label="delta cells")
    cell = partial(_delta_cell, params=params, n_steps=n_steps, burn_in=burn_in)
    return _frame(runner.map(cell, [float(d) for d in delta_grid]), DELTA_COLUMNS)

