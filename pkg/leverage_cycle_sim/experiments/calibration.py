"""Matching simulated average leverage and bank size to targets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from leverage_cycle_sim.analysis.risk_metrics import equity_returns, realized_shortfall
from leverage_cycle_sim.common.exceptions import CalibrationError, InvalidSeriesError, ParameterError
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.core import default_initial_state, simulate
from leverage_cycle_sim.model.params import ModelParams
from leverage_cycle_sim.model.stochastic import GarchParams, shock_source

logger = get_logger(__name__)


@dataclass(frozen=True)
class TargetSpec:
    lambda_hat: float = 5.8
    r_hat: float = 0.27
    b: float = -0.5
    seeds: Tuple[int, ...] = field(default_factory=lambda: tuple(range(16)))
    t_len: int = 5000
    burn_in: int = 500
    rel_tol: float = 0.01

    def __post_init__(self) -> None:
        if not self.lambda_hat > 1:
            raise ParameterError(f"lambda_hat must be > 1, got {self.lambda_hat}")
        if not self.r_hat > 0:
            raise ParameterError(f"r_hat must be > 0, got {self.r_hat}")
        if len(self.seeds) == 0:
            raise ParameterError("at least one seed is required")
        if self.t_len < 1 or self.burn_in < 0:
            raise ParameterError(f"invalid window t_len={self.t_len}, burn_in={self.burn_in}")


@dataclass(frozen=True)
class PolicyEvaluation:
    mean_leverage: float
    mean_r: float
    rs_q: float
    diverged: int
    invalid_returns: int = 0


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    e_bar: float
    mean_leverage: float
    mean_r: float
    iterations: int


@dataclass(frozen=True)
class BroydenResult:
    x: NDArray[np.float64]
    residual: NDArray[np.float64]
    iterations: int


def broyden_solve(f: Callable[[NDArray[np.float64]], NDArray[np.float64]], x0, jac, tol: float = 1e-8,
                  max_iter: int = 100, backtrack_fac: float = 0.5, max_backtrack: int = 10) -> BroydenResult:
    """Broyden's method with backtracking.

    A trial step is shortened by ``backtrack_fac`` while the residual is non-finite or does
    not improve; accepted steps update the Jacobian with a rank-one correction.
    """
    x = np.array(x0, dtype=float).ravel()
    jac = np.array(jac, dtype=float)
    y = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(y)):
        raise CalibrationError("residual is not finite at the initial guess")

    for it in range(max_iter):
        abs_diff = float(np.max(np.abs(y)))
        logger.debug(f"Broyden it = {it:3d} -> max. abs. error = {abs_diff:8.1e}")
        if abs_diff < tol:
            return BroydenResult(x=x, residual=y, iterations=it)

        try:
            dx = np.linalg.solve(jac, -y)
        except np.linalg.LinAlgError as e:
            raise CalibrationError(f"singular Broyden Jacobian: {str(e)}") from e

        for _ in range(max_backtrack):
            ynew = np.asarray(f(x + dx), dtype=float)
            if np.all(np.isfinite(ynew)) and np.max(np.abs(ynew)) < abs_diff:
                dy = ynew - y
                jac = jac + np.outer((dy - jac @ dx) / np.linalg.norm(dx) ** 2, dx)
                y = ynew
                x = x + dx
                break
            logger.debug("Broyden backtracking")
            dx = dx * backtrack_fac
        else:
            raise CalibrationError("too many backtracks, targets may be unreachable")

    if float(np.max(np.abs(y))) < tol:
        return BroydenResult(x=x, residual=y, iterations=max_iter)
    raise CalibrationError(f"no convergence after {max_iter} iterations")


def evaluate_policy(params: ModelParams, garch: Optional[GarchParams], seeds: Sequence[int], t_len: int,
                    burn_in: int, q: Optional[float] = None) -> PolicyEvaluation:
    """Seed-averaged time means of target leverage and relative size, and optionally RS_q.

    Each seed runs ``burn_in + t_len + 1`` steps so the post-burn-in window yields exactly
    ``t_len`` equity returns.
    """
    leverages, sizes, shortfalls = [], [], []
    diverged = invalid = 0
    initial = default_initial_state(params)
    for seed in seeds:
        trajectory = simulate(initial, params, shock_source(garch, seed), burn_in + t_len + 1)
        if trajectory.is_diverged:
            diverged += 1
            continue
        window = trajectory.tail(burn_in)
        leverages.append(float(np.mean(window.columns["target_leverage"][:t_len])))
        sizes.append(float(np.mean(window.columns["relative_size"][:t_len])))
        if q is not None:
            try:
                shortfalls.append(realized_shortfall(equity_returns(window), q).rs_q)
            except InvalidSeriesError as e:
                logger.warning(f"Seed {seed}: {str(e)}")
                invalid += 1
    if diverged:
        return PolicyEvaluation(math.nan, math.nan, math.nan, diverged, invalid)
    rs_q = float(np.mean(shortfalls)) if shortfalls and not invalid else math.nan
    return PolicyEvaluation(float(np.mean(leverages)), float(np.mean(sizes)), rs_q, 0, invalid)


def initial_guess(spec: TargetSpec, params: ModelParams) -> Tuple[float, float]:
    """(alpha, e_bar) that put the fixed point exactly on the targets."""
    alpha = spec.lambda_hat * params.policy.sigma0_sq ** (-spec.b)
    e_bar = params.mu * spec.r_hat / (spec.lambda_hat * (params.w_f0 + params.w_b * spec.r_hat))
    return alpha, e_bar


def match_targets(spec: TargetSpec, params: ModelParams, garch: Optional[GarchParams] = None,
                  max_iter: int = 100) -> CalibrationResult:
    """Solve for (alpha, e_bar) so simulated average leverage and size hit the targets.

    Unknowns are (log alpha, log e_bar); residuals are log ratios of simulated to target
    values. Every residual evaluation reuses the same seeds.
    """
    base = params.with_policy(b=spec.b)
    alpha0, e_bar0 = initial_guess(spec, base)
    slope = 1.0 + spec.r_hat * base.w_b / base.w_f0
    jac0 = np.array([[1.0, 0.0], [slope, slope]])
    tol = math.log1p(spec.rel_tol)

    def residual(x):
        alpha, e_bar = np.exp(x)
        try:
            variant = base.with_changes(alpha=float(alpha), e_bar=float(e_bar))
        except ParameterError:
            return np.full(2, np.nan)
        result = evaluate_policy(variant, garch, spec.seeds, spec.t_len, spec.burn_in)
        if not (result.mean_leverage > 0 and result.mean_r > 0):
            return np.full(2, np.nan)
        return np.array([math.log(result.mean_leverage / spec.lambda_hat), math.log(result.mean_r / spec.r_hat)])

    try:
        solution = broyden_solve(residual, np.log([alpha0, e_bar0]), jac0, tol=tol, max_iter=max_iter)
    except CalibrationError as e:
        logger.error(f"Calibration failed for b={spec.b}: {str(e)}")
        raise

    alpha, e_bar = (float(v) for v in np.exp(solution.x))
    mean_leverage, mean_r = (spec.lambda_hat * math.exp(solution.residual[0]),
                             spec.r_hat * math.exp(solution.residual[1]))
    logger.info(f"Calibrated b={spec.b}: alpha={alpha:.6g}, e_bar={e_bar:.6g} in {solution.iterations} iterations")
    return CalibrationResult(alpha=alpha, e_bar=e_bar, mean_leverage=mean_leverage, mean_r=mean_r,
                             iterations=solution.iterations)
