"""Local and global stability of the bank/fund map.

Any fund weight is a fixed point once the price sits at the fundamental value, so the
Jacobian at x* always carries a neutral eigenvalue 1 along the w_F axis. Stability
decisions and Lyapunov exponents therefore work on the five transverse coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from leverage_cycle_sim.common.exceptions import (
    BracketError,
    DivergenceError,
    EigenvalueError,
    ParameterError,
)
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.core import (
    default_initial_state,
    fixed_point_state,
    map_vector,
    perturbed_fixed_point,
    simulate,
    step,
    target_leverage,
)
from leverage_cycle_sim.model.params import STATE_FIELDS, W_F_INDEX, ModelParams, State
from leverage_cycle_sim.model.stochastic import GarchParams, shock_path

logger = get_logger(__name__)

FD_STEP = 1e-7
EIG_RESIDUAL_TOL = 1e-8
SCAN_RANGE = (1e-4, 10.0)
SCAN_RATIO = 1.25
BISECTION_RTOL = 1e-4
SIGMA_SQ_INDEX = STATE_FIELDS.index("sigma_sq")
TRANSVERSE = tuple(i for i in range(len(STATE_FIELDS)) if i != W_F_INDEX)
UNBOUNDED_PRICE_FACTOR = 1e6


class Regime(str, Enum):
    STABLE = "Stable"
    CYCLES = "Cycles"
    GLOBALLY_UNSTABLE = "GloballyUnstable"


@dataclass(frozen=True)
class FixedPoint:
    state: State
    lambda_star: float
    r_star: float
    feasible: bool


@dataclass(frozen=True)
class StabilityReport:
    eigenvalues: NDArray[np.complex128]
    transverse_eigenvalues: NDArray[np.complex128]
    spectral_radius: float
    lyapunov: Optional[float] = None
    regime: Optional[Regime] = None


@dataclass(frozen=True)
class CriticalPoint:
    alpha_c: float
    lambda_c: float
    r_c: float
    b: float


@dataclass(frozen=True)
class LyapunovEstimate:
    exponent: float
    reliable: bool
    steps: int
    mean_target_leverage: float


@dataclass(frozen=True)
class StochasticThreshold:
    """lambda_c is the time-averaged target leverage at alpha_c; lambda_star_c the fixed-point leverage there.

    mean_target_leverage is the time average at the deterministic threshold, for comparison.
    """

    alpha_c: float
    lambda_c: float
    lambda_star_c: float
    mean_target_leverage: float
    b: float
    evaluations: int


def fixed_point(params: ModelParams) -> FixedPoint:
    policy = params.policy
    if policy.sigma0_sq <= 0 and policy.b < 0:
        raise ParameterError("sigma0_sq = 0 with b < 0 has no finite fixed point")
    state = fixed_point_state(params)
    lambda_star = policy.leverage_cap
    if params.e_bar == 0:
        r_star = 0.0
    else:
        inverse = params.mu / (params.e_bar * lambda_star * params.w_f0) - params.w_b / params.w_f0
        r_star = 1.0 / inverse if inverse != 0 else math.inf
    feasible = 0.0 < state.n < 1.0 and params.e_bar > 0
    return FixedPoint(state=state, lambda_star=lambda_star, r_star=r_star, feasible=feasible)


def numerical_jacobian(func: Callable[[NDArray[np.float64]], NDArray[np.float64]], x, h: float = FD_STEP,
                       steps=None) -> NDArray[np.float64]:
    """Central differences with per-coordinate steps h_j = max(h, h |x_j|) unless ``steps`` is given."""
    x = np.asarray(x, dtype=float)
    size = x.size
    if steps is None:
        steps = np.maximum(h, h * np.abs(x))
    columns = []
    for j in range(size):
        h_j = float(steps[j])
        forward, backward = x.copy(), x.copy()
        forward[j] += h_j
        backward[j] -= h_j
        columns.append((np.asarray(func(forward), dtype=float) - np.asarray(func(backward), dtype=float)) / (2.0 * h_j))
    return np.column_stack(columns)


def jacobian(params: ModelParams, x, h: float = FD_STEP, chi: float = 0.0) -> NDArray[np.float64]:
    """Jacobian of the map at ``x`` with the shock held at ``chi``."""
    vector = x.as_array() if isinstance(x, State) else np.asarray(x, dtype=float)
    steps = np.maximum(h, h * np.abs(vector))
    # perceived risk is resolved on the scale of the policy offset
    steps[SIGMA_SQ_INDEX] = h * (abs(vector[SIGMA_SQ_INDEX]) + params.policy.sigma0_sq)
    matrix = numerical_jacobian(lambda v: map_vector(v, params, chi), vector, h, steps)
    if not np.all(np.isfinite(matrix)):
        raise DivergenceError(f"non-finite Jacobian entries near x = {vector.tolist()}")
    return matrix


def eigenvalues(m) -> NDArray[np.complex128]:
    """All eigenvalues, sorted by descending modulus, each checked against its eigenvector."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise EigenvalueError("matrix has non-finite entries")
    try:
        values, vectors = np.linalg.eig(m)
    except np.linalg.LinAlgError as e:
        logger.error(f"Eigen-decomposition failed: {str(e)}")
        raise EigenvalueError(str(e)) from e
    for value, vector in zip(values, vectors.T):
        residual = np.linalg.norm(m @ vector - value * vector) / np.linalg.norm(vector)
        # scales with |e| only, never with ||m||
        if residual > EIG_RESIDUAL_TOL * max(1.0, abs(value)):
            raise EigenvalueError(f"eigenvalue {value} failed residual check ({residual:.2e})")
    order = np.argsort(-np.abs(values), kind="stable")
    return values[order]


def transverse_block(matrix) -> NDArray[np.float64]:
    """Drop the neutral fund-weight row and column."""
    matrix = np.asarray(matrix, dtype=float)
    return matrix[np.ix_(TRANSVERSE, TRANSVERSE)]


def spectral_radius(params: ModelParams, x: Optional[State] = None) -> float:
    """Largest transverse eigenvalue modulus at ``x`` (default: the fixed point)."""
    point = x if x is not None else fixed_point_state(params)
    return float(np.abs(eigenvalues(transverse_block(jacobian(params, point)))[0]))


def stability_report(params: ModelParams, x: Optional[State] = None) -> StabilityReport:
    point = x if x is not None else fixed_point_state(params)
    matrix = jacobian(params, point)
    transverse = eigenvalues(transverse_block(matrix))
    return StabilityReport(
        eigenvalues=eigenvalues(matrix),
        transverse_eigenvalues=transverse,
        spectral_radius=float(np.abs(transverse[0])),
    )


def alpha_scan_grid(params: ModelParams, b: float,
                    scan_range=SCAN_RANGE, ratio: float = SCAN_RATIO) -> NDArray[np.float64]:
    """Geometric riskiness grid covering the same fixed-point leverage range for every b."""
    scale = params.policy.sigma0_sq ** (-(b + 0.5))
    low, high = scan_range
    count = int(math.floor(math.log(high / low) / math.log(ratio))) + 1
    return low * scale * ratio ** np.arange(count)


def _radius_at(params: ModelParams, alpha: float) -> float:
    try:
        return spectral_radius(params.with_policy(alpha=alpha))
    except (DivergenceError, EigenvalueError) as e:
        logger.debug(f"Radius undefined at alpha={alpha}: {str(e)}")
        return math.inf


def critical_alpha(params: ModelParams, b: float, scan_range=SCAN_RANGE, ratio: float = SCAN_RATIO,
                   rtol: float = BISECTION_RTOL) -> CriticalPoint:
    """Riskiness at which the leading transverse eigenvalue at x* crosses the unit circle."""
    variant = params.with_policy(b=b)
    grid = alpha_scan_grid(variant, b, scan_range, ratio)
    previous_alpha, previous_radius = None, None
    bracket = None
    for alpha in grid:
        radius = _radius_at(variant, alpha)
        if previous_radius is not None and previous_radius < 1.0 <= radius:
            bracket = (previous_alpha, alpha)
            break
        previous_alpha, previous_radius = alpha, radius
    if bracket is None:
        raise BracketError(f"no stability crossing for b={b} in alpha range [{grid[0]:.3e}, {grid[-1]:.3e}]")

    low, high = bracket
    while (high - low) / high >= rtol:
        middle = 0.5 * (low + high)
        if _radius_at(variant, middle) < 1.0:
            low = middle
        else:
            high = middle
    alpha_c = 0.5 * (low + high)
    point = fixed_point(variant.with_policy(alpha=alpha_c))
    logger.info(f"Critical riskiness for b={b}: alpha_c={alpha_c:.6g}, lambda_c={point.lambda_star:.6g}")
    return CriticalPoint(alpha_c=alpha_c, lambda_c=point.lambda_star, r_c=point.r_star, b=b)


def _unit_transverse_vector() -> NDArray[np.float64]:
    """Unit tangent over price and balance sheet; sigma^2 is measured in far smaller units."""
    v = np.ones(len(STATE_FIELDS))
    v[W_F_INDEX] = 0.0
    v[SIGMA_SQ_INDEX] = 0.0
    return v / np.linalg.norm(v)


def lyapunov_leading(params: ModelParams, seed: int, n_steps: int, burn_in: int = 0,
                     garch: Optional[GarchParams] = None, initial: Optional[State] = None,
                     h: float = FD_STEP) -> LyapunovEstimate:
    """Leading transverse exponent (per year) by tangent propagation along one noisy run.

    The tangent vector goes through the Jacobian of the map at each realized state with
    that step's shock held fixed, and is renormalized every step.
    """
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    shocks = shock_path(garch, seed, burn_in + n_steps)
    state = initial if initial is not None else default_initial_state(params)
    v = _unit_transverse_vector()
    log_growth = 0.0
    leverage_sum = 0.0
    counted = 0
    for index, chi in enumerate(shocks):
        try:
            matrix = jacobian(params, state, h, chi)
        except DivergenceError as e:
            logger.warning(f"Lyapunov run (seed={seed}) left the live region at step {index}: {str(e)}")
            return LyapunovEstimate(math.nan, False, counted, math.nan)
        new_state, status = step(state, params, chi)
        if status.is_diverged:
            logger.warning(f"Lyapunov run (seed={seed}) diverged at step {index}: {status.reason}")
            return LyapunovEstimate(math.nan, False, counted, math.nan)
        w = matrix @ v
        w[W_F_INDEX] = 0.0
        norm = float(np.linalg.norm(w))
        if not (norm > 0 and math.isfinite(norm)):
            return LyapunovEstimate(math.nan, False, counted, math.nan)
        if index >= burn_in:
            log_growth += math.log(norm)
            leverage_sum += target_leverage(state.sigma_sq, params.policy)
            counted += 1
        v = w / norm
        state = new_state
    return LyapunovEstimate(
        exponent=log_growth / (counted * params.tau),
        reliable=True,
        steps=counted,
        mean_target_leverage=leverage_sum / counted,
    )


def lyapunov_clone(params: ModelParams, seed: int, n_steps: int, burn_in: int = 0,
                   garch: Optional[GarchParams] = None, initial: Optional[State] = None,
                   separation: float = 1e-8) -> LyapunovEstimate:
    """Two-trajectory estimate under common noise; the clone shares the base's fund weight."""
    shocks = shock_path(garch, seed, burn_in + n_steps)
    base = initial if initial is not None else default_initial_state(params)
    clone = State.from_array(base.as_array() + separation * _unit_transverse_vector())
    log_growth = 0.0
    leverage_sum = 0.0
    counted = 0
    for index, chi in enumerate(shocks):
        next_base, base_status = step(base, params, chi)
        next_clone, clone_status = step(clone, params, chi)
        if base_status.is_diverged or clone_status.is_diverged:
            logger.warning(f"Clone run (seed={seed}) diverged at step {index}")
            return LyapunovEstimate(math.nan, False, counted, math.nan)
        difference = next_clone.as_array() - next_base.as_array()
        difference[W_F_INDEX] = 0.0
        distance = float(np.linalg.norm(difference))
        if not distance > 0:
            return LyapunovEstimate(math.nan, False, counted, math.nan)
        if index >= burn_in:
            log_growth += math.log(distance / separation)
            leverage_sum += target_leverage(base.sigma_sq, params.policy)
            counted += 1
        base = next_base
        clone = State.from_array(next_base.as_array() + difference * (separation / distance))
    return LyapunovEstimate(
        exponent=log_growth / (counted * params.tau),
        reliable=True,
        steps=counted,
        mean_target_leverage=leverage_sum / counted,
    )


def _median_lyapunov(params: ModelParams, seeds: Sequence[int], n_steps: int, burn_in: int,
                     garch: Optional[GarchParams]):
    # silent runs start at a nudged x*, noisy ones at the default start
    initial = perturbed_fixed_point(params) if garch is None or garch.is_deterministic else None
    estimates = [lyapunov_leading(params, seed, n_steps, burn_in, garch, initial) for seed in seeds]
    exponents = [e.exponent if e.reliable else math.inf for e in estimates]
    leverages = [e.mean_target_leverage for e in estimates if e.reliable]
    mean_leverage = float(np.median(leverages)) if leverages else math.nan
    return float(np.median(exponents)), mean_leverage


def stochastic_critical_leverage(params: ModelParams, b: float, seeds: Sequence[int],
                                 garch: Optional[GarchParams] = None, n_steps: int = 10_000,
                                 burn_in: int = 1_000, ratio: float = SCAN_RATIO, n_bisect: int = 5,
                                 max_scan: int = 30) -> StochasticThreshold:
    """Riskiness where the seed-median Lyapunov exponent turns non-negative.

    Returns the time-averaged target leverage there (median over seeds). The scan walks a
    geometric grid outward from the deterministic threshold until the sign changes.
    """
    if len(seeds) == 0:
        raise ParameterError("at least one seed is required")
    variant = params.with_policy(b=b)
    start = critical_alpha(params, b).alpha_c
    evaluations = 0

    def evaluate(alpha):
        nonlocal evaluations
        evaluations += 1
        exponent, leverage = _median_lyapunov(variant.with_policy(alpha=alpha), seeds, n_steps, burn_in, garch)
        logger.debug(f"b={b} alpha={alpha:.6g}: median exponent {exponent:.4g}, mean target leverage {leverage:.4g}")
        return exponent, leverage

    low = high = None
    alpha = start
    exponent, leverage = evaluate(alpha)
    reference_leverage = leverage
    if exponent >= 0:
        high = (alpha, leverage)
        for _ in range(max_scan):
            alpha /= ratio
            exponent, leverage = evaluate(alpha)
            if exponent < 0:
                low = (alpha, leverage)
                break
            high = (alpha, leverage)
    else:
        low = (alpha, leverage)
        for _ in range(max_scan):
            alpha *= ratio
            exponent, leverage = evaluate(alpha)
            if exponent >= 0:
                high = (alpha, leverage)
                break
            low = (alpha, leverage)
    if low is None or high is None:
        raise BracketError(f"no Lyapunov sign change for b={b} within {max_scan} scan steps")

    for _ in range(n_bisect):
        middle = math.sqrt(low[0] * high[0])
        exponent, leverage = evaluate(middle)
        if exponent < 0:
            low = (middle, leverage)
        else:
            high = (middle, leverage)

    alpha_c = math.sqrt(low[0] * high[0])
    _, lambda_c = evaluate(alpha_c)
    if not math.isfinite(lambda_c):
        known = [value for value in (low[1], high[1]) if math.isfinite(value)]
        lambda_c = float(np.mean(known)) if known else math.nan
    return StochasticThreshold(
        alpha_c=alpha_c,
        lambda_c=lambda_c,
        lambda_star_c=alpha_c * variant.policy.sigma0_sq ** b,
        mean_target_leverage=reference_leverage,
        b=b,
        evaluations=evaluations,
    )


def _price_distance(prices: NDArray[np.float64], lags: NDArray[np.float64], mu: float) -> NDArray[np.float64]:
    return (np.abs(prices - mu) + np.abs(lags - mu)) / mu


def _converges(params: ModelParams, initial: State, n_steps: int) -> bool:
    trajectory = simulate(initial, params, None, n_steps)
    if trajectory.is_diverged:
        return False
    distance = _price_distance(trajectory.prices, trajectory.coordinate("p_lag"), params.mu)
    initial_distance = abs(initial.p - params.mu) / params.mu + abs(initial.p_lag - params.mu) / params.mu
    tenth = max(1, n_steps // 10)
    early = max(initial_distance, float(distance[:tenth].max()))
    late = float(distance[-tenth:].max())
    return late < 0.5 * early


def classify_regime(params: ModelParams, converge_years: float = 100.0, bounded_years: float = 500.0) -> Regime:
    """Stable, Cycles or GloballyUnstable for the deterministic map.

    Stable needs a feasible x*, a transverse radius below 1 and convergence from a slightly
    moved x*. The bounded check runs from the default start, which enters the cycle without
    a fire sale.
    """
    radius = _radius_at(params, params.policy.alpha)
    local_steps = int(round(converge_years / params.tau))
    if radius < 1.0 and fixed_point(params).feasible and _converges(params, perturbed_fixed_point(params), local_steps):
        return Regime.STABLE

    trajectory = simulate(default_initial_state(params), params, None, int(round(bounded_years / params.tau)))
    if trajectory.is_diverged:
        logger.debug(f"alpha={params.policy.alpha:.6g} b={params.policy.b}: diverged at step {trajectory.diverged_at}")
        return Regime.GLOBALLY_UNSTABLE
    prices = trajectory.prices
    mu = params.mu
    if np.any(prices > UNBOUNDED_PRICE_FACTOR * mu) or np.any(prices < mu / UNBOUNDED_PRICE_FACTOR):
        return Regime.GLOBALLY_UNSTABLE
    return Regime.CYCLES
