"""The six-dimensional bank/fund map, its balance-sheet accounting and trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from leverage_cycle_sim.common.exceptions import LeverageCycleError, ParameterError
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.params import STATE_FIELDS, ModelParams, PolicyParams, State

logger = get_logger(__name__)

DIVERGENCE_EPS = 1e-12
W_F_BOUNDS = (1e-6, 1.0 - 1e-6)
CLEARING_TOL = 1e-9
ACCOUNTING_TOL = 1e-9
DEFAULT_PRICE_OFFSET = 1e-3
FIXED_POINT_NUDGE = 1e-8
INITIAL_SIGMA_SQ = 1e-3

TRAJECTORY_COLUMNS = (
    "t_years", "sigma_sq", "w_f", "price", "n", "l_b", "p_lag", "leverage", "target_leverage",
    "equity", "assets_bank", "relative_size", "delta_b", "status",
)


class ShockSource(Protocol):
    def next_shock(self) -> float:
        ...


def target_leverage(sigma_sq, policy: PolicyParams):
    """alpha * (sigma^2 + sigma0^2) ** b; works on floats and numpy arrays."""
    return policy.alpha * (sigma_sq + policy.sigma0_sq) ** policy.b


def policy_sensitivity(sigma_sq, policy: PolicyParams):
    """dF/dsigma^2. Negative for procyclical policies (b < 0), positive for countercyclical ones."""
    if policy.b == 0:
        return 0.0 * sigma_sq
    return policy.alpha * policy.b * (sigma_sq + policy.sigma0_sq) ** (policy.b - 1.0)


def policy_curve(sigma_sq_grid, policy: PolicyParams, b_values=(-0.5, 0.0, 0.5)) -> pd.DataFrame:
    """Target leverage and its sensitivity over a perceived-risk grid for several cyclicalities."""
    grid = np.asarray(sigma_sq_grid, dtype=float)
    frames = []
    for b in b_values:
        variant = PolicyParams(alpha=policy.alpha, sigma0_sq=policy.sigma0_sq, b=b)
        frames.append(pd.DataFrame({
            "b": b,
            "sigma_sq": grid,
            "target_leverage": target_leverage(grid, variant),
            "sensitivity": policy_sensitivity(grid, variant),
        }))
    return pd.concat(frames, ignore_index=True)


@dataclass(frozen=True)
class Derived:
    """Balance-sheet quantities implied by a state, computed before the new price is known."""

    a_b: float
    e_b: float
    leverage: float
    lambda_bar: float
    delta_b: float
    kappa_b: float
    kappa_f: float
    c_b: float
    c_f: float
    a_f: float
    r_size: float

    @property
    def insolvent(self) -> bool:
        return not self.e_b > 0


def derived_quantities(state: State, params: ModelParams) -> Derived:
    p, n, w_f = state.p, state.n, state.w_f
    a_b = p * n / params.w_b
    e_b = a_b - state.l_b
    lambda_bar = target_leverage(state.sigma_sq, params.policy)
    gap = lambda_bar * e_b - a_b
    speed = params.theta if gap >= 0 else params.theta_down
    delta_b = params.tau * speed * gap
    kappa_b = params.tau * params.eta * (params.e_bar - e_b)
    c_b = (1.0 - params.w_b) * n * p / params.w_b + kappa_b
    a_f = (1.0 - n) * p / w_f
    c_f = (1.0 - w_f) * (1.0 - n) * p / w_f - kappa_b
    r_size = a_b / a_f if a_f != 0 else math.nan
    leverage = a_b / e_b if e_b > 0 else math.nan
    return Derived(
        a_b=a_b, e_b=e_b, leverage=leverage, lambda_bar=lambda_bar, delta_b=delta_b,
        kappa_b=kappa_b, kappa_f=-kappa_b, c_b=c_b, c_f=c_f, a_f=a_f, r_size=r_size,
    )


class StatusTag(str, Enum):
    LIVE = "live"
    CLAMPED = "clamped"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class StepStatus:
    tag: StatusTag = StatusTag.LIVE
    reason: Optional[str] = None
    clamp_count: int = 0

    @property
    def is_diverged(self) -> bool:
        return self.tag is StatusTag.DIVERGED

    @classmethod
    def diverged(cls, reason: str) -> "StepStatus":
        return cls(tag=StatusTag.DIVERGED, reason=reason)

    def __str__(self) -> str:
        return f"{self.tag.value}:{self.reason}" if self.reason else self.tag.value


LIVE = StepStatus()


def _clamp_w_f(w_f: float) -> Tuple[float, bool]:
    low, high = W_F_BOUNDS
    if w_f < low:
        return low, True
    if w_f > high:
        return high, True
    return w_f, False


def step(state: State, params: ModelParams, chi: float = 0.0,
         derived: Optional[Derived] = None) -> Tuple[State, StepStatus]:
    """Advance the map by one time step.

    On divergence the input state is returned unchanged together with a diverged status.
    """
    d = derived if derived is not None else derived_quantities(state, params)
    tau = params.tau
    decay = tau * params.delta

    log_return = math.log(state.p / state.p_lag) if state.p > 0 and state.p_lag > 0 else math.nan
    sigma_sq = (1.0 - decay) * state.sigma_sq + decay * (log_return * params.t_var / tau) ** 2

    w_f_raw = state.w_f + (state.w_f / state.p) * (tau * params.rho * (params.mu - state.p) + math.sqrt(tau) * chi)
    if not math.isfinite(w_f_raw):
        return state, StepStatus.diverged("non-finite fund weight")
    w_f, clamped = _clamp_w_f(w_f_raw)

    denominator = 1.0 - params.w_b * state.n - (1.0 - state.n) * w_f
    if not denominator > DIVERGENCE_EPS:
        return state, StepStatus.diverged(f"clearing denominator {denominator:.3e}")
    price = (params.w_b * (d.c_b + d.delta_b) + w_f * d.c_f) / denominator
    if not math.isfinite(price) or price <= 0:
        return state, StepStatus.diverged(f"clearing price {price:.3e}")

    n = params.w_b * (state.n * price + d.c_b + d.delta_b) / price
    new_state = State(
        sigma_sq=sigma_sq, w_f=w_f, p=price, n=n, l_b=state.l_b + d.delta_b, p_lag=state.p,
    )
    if not new_state.is_live:
        return state, StepStatus.diverged("non-finite state")
    if clamped:
        return new_state, StepStatus(tag=StatusTag.CLAMPED, clamp_count=1)
    return new_state, LIVE


def map_vector(x: NDArray[np.float64], params: ModelParams, chi: float = 0.0) -> NDArray[np.float64]:
    """g(x) on a raw state vector; NaNs mark a divergent image."""
    state = State.from_array(x)
    if not (state.p > 0 and state.p_lag > 0 and 0 < state.w_f < 1):
        return np.full(len(STATE_FIELDS), np.nan)
    new_state, status = step(state, params, chi)
    if status.is_diverged:
        return np.full(len(STATE_FIELDS), np.nan)
    return new_state.as_array()


def bank_demand(state: State, new_price: float, params: ModelParams, d: Derived) -> float:
    return params.w_b * (state.n * new_price + d.c_b + d.delta_b) / new_price


def fund_demand(state: State, new_state: State, d: Derived) -> float:
    return new_state.w_f * ((1.0 - state.n) * new_state.p + d.c_f) / new_state.p


def clearing_residual(state: State, new_state: State, params: ModelParams, d: Derived) -> float:
    """D_B + D_F - 1 at the new price (zero when the market clears)."""
    return bank_demand(state, new_state.p, params, d) + fund_demand(state, new_state, d) - 1.0


def check_step_invariants(state: State, new_state: State, params: ModelParams, d: Derived) -> None:
    if d.kappa_b + d.kappa_f != 0:
        raise LeverageCycleError(f"cash flows do not cancel: {d.kappa_b} + {d.kappa_f}")
    if abs(d.e_b + state.l_b - d.a_b) > ACCOUNTING_TOL * max(1.0, abs(d.a_b)):
        raise LeverageCycleError(f"accounting identity violated: E_B + L_B - A_B = {d.e_b + state.l_b - d.a_b}")
    d_b = bank_demand(state, new_state.p, params, d)
    d_f = fund_demand(state, new_state, d)
    if abs(d_b + d_f - 1.0) > CLEARING_TOL * max(1.0, abs(d_b), abs(d_f)):
        raise LeverageCycleError(f"market does not clear: D_B + D_F - 1 = {d_b + d_f - 1.0}")


def fixed_point_state(params: ModelParams) -> State:
    """x* = (0, w_f0, mu, lambda* E w_B / mu, (lambda* - 1) E, mu) with lambda* = alpha sigma0^{2b}."""
    lambda_star = params.policy.leverage_cap
    return State(
        sigma_sq=0.0,
        w_f=params.w_f0,
        p=params.mu,
        n=lambda_star * params.e_bar * params.w_b / params.mu,
        l_b=(lambda_star - 1.0) * params.e_bar,
        p_lag=params.mu,
    )


def default_initial_state(params: ModelParams, price_offset: float = DEFAULT_PRICE_OFFSET,
                          sigma_sq: Optional[float] = None) -> State:
    """The bank at target leverage for ``sigma_sq`` with equity E, and the price nudged by ``price_offset``.

    ``sigma_sq`` defaults to INITIAL_SIGMA_SQ for procyclical policies and 0 otherwise, so b >= 0
    starts next to the fixed point.
    """
    if sigma_sq is None:
        sigma_sq = INITIAL_SIGMA_SQ if params.policy.b < 0 else 0.0
    if sigma_sq < 0:
        raise ParameterError(f"initial sigma_sq must be non-negative, got {sigma_sq}")
    lam = float(target_leverage(sigma_sq, params.policy))
    return State(
        sigma_sq=sigma_sq,
        w_f=params.w_f0,
        p=params.mu * (1.0 + price_offset),
        n=lam * params.e_bar * params.w_b / params.mu,
        l_b=(lam - 1.0) * params.e_bar,
        p_lag=params.mu,
    )


def perturbed_fixed_point(params: ModelParams, price_offset: float = FIXED_POINT_NUDGE) -> State:
    """x* with only the price moved by ``price_offset``; the start for local convergence checks."""
    x_star = fixed_point_state(params)
    return State(sigma_sq=0.0, w_f=x_star.w_f, p=params.mu * (1.0 + price_offset), n=x_star.n,
                 l_b=x_star.l_b, p_lag=params.mu)


@dataclass
class Trajectory:
    """Post-step states x(tau), ..., x(k tau) with the accounting derived at each of them."""

    tau: float
    initial: State
    states: NDArray[np.float64]
    columns: Dict[str, NDArray[np.float64]]
    row_status: List[str]
    shocks: NDArray[np.float64]
    final_status: StepStatus = LIVE
    diverged_at: Optional[int] = None
    clamp_count: int = 0
    n_excursions: int = 0
    insolvent_steps: int = 0
    t_offset: int = 0

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def is_diverged(self) -> bool:
        return self.final_status.is_diverged

    @property
    def t_years(self) -> NDArray[np.float64]:
        return (np.arange(len(self)) + 1 + self.t_offset) * self.tau

    def coordinate(self, name: str) -> NDArray[np.float64]:
        return self.states[:, STATE_FIELDS.index(name)]

    @property
    def prices(self) -> NDArray[np.float64]:
        return self.coordinate("p")

    def state(self, index: int) -> State:
        return State.from_array(self.states[index])

    def tail(self, start: int) -> "Trajectory":
        """Rows from ``start`` on (burn-in removal); the row before ``start`` becomes the initial state."""
        start = max(0, min(start, len(self)))
        initial = self.initial if start == 0 else self.state(start - 1)
        return Trajectory(
            tau=self.tau,
            initial=initial,
            states=self.states[start:],
            columns={k: v[start:] for k, v in self.columns.items()},
            row_status=self.row_status[start:],
            shocks=self.shocks[start:],
            final_status=self.final_status,
            diverged_at=self.diverged_at,
            clamp_count=self.clamp_count,
            n_excursions=self.n_excursions,
            insolvent_steps=self.insolvent_steps,
            t_offset=self.t_offset + start,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t_years": self.t_years})
        for index, name in enumerate(STATE_FIELDS):
            frame[name if name != "p" else "price"] = self.states[:, index]
        for name in TRAJECTORY_COLUMNS[7:13]:
            frame[name] = self.columns[name]
        frame["status"] = self.row_status
        return frame.loc[:, list(TRAJECTORY_COLUMNS)]

    @classmethod
    def from_states(cls, states, params: ModelParams, initial: Optional[State] = None) -> "Trajectory":
        """Rebuild a trajectory (derived columns included) from a sequence of state vectors."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        builder = _TrajectoryBuilder()
        for row in states:
            state = State.from_array(row)
            builder.append(state, derived_quantities(state, params), LIVE, 0.0)
        first = initial if initial is not None else State.from_array(states[0])
        return builder.build(params.tau, first, LIVE, None)


class _TrajectoryBuilder:
    def __init__(self) -> None:
        self.rows: List[NDArray[np.float64]] = []
        self.columns: Dict[str, List[float]] = {name: [] for name in TRAJECTORY_COLUMNS[7:13]}
        self.status: List[str] = []
        self.shocks: List[float] = []
        self.clamp_count = 0
        self.n_excursions = 0
        self.insolvent_steps = 0

    def append(self, state: State, d: Derived, status: StepStatus, chi: float) -> None:
        self.rows.append(state.as_array())
        self.columns["leverage"].append(d.leverage)
        self.columns["target_leverage"].append(d.lambda_bar)
        self.columns["equity"].append(d.e_b)
        self.columns["assets_bank"].append(d.a_b)
        self.columns["relative_size"].append(d.r_size)
        self.columns["delta_b"].append(d.delta_b)
        self.shocks.append(chi)
        self.clamp_count += status.clamp_count
        if not 0.0 <= state.n <= 1.0:
            self.n_excursions += 1
        label = status.tag.value
        if d.insolvent:
            self.insolvent_steps += 1
            label = "insolvent"
        self.status.append(label)

    def build(self, tau: float, initial: State, final_status: StepStatus, diverged_at: Optional[int]) -> Trajectory:
        states = np.array(self.rows, dtype=float).reshape(len(self.rows), len(STATE_FIELDS))
        return Trajectory(
            tau=tau,
            initial=initial,
            states=states,
            columns={k: np.array(v, dtype=float) for k, v in self.columns.items()},
            row_status=self.status,
            shocks=np.array(self.shocks, dtype=float),
            final_status=final_status,
            diverged_at=diverged_at,
            clamp_count=self.clamp_count,
            n_excursions=self.n_excursions,
            insolvent_steps=self.insolvent_steps,
        )


def simulate(initial: State, params: ModelParams, noise: Optional[ShockSource] = None, n_steps: int = 1,
             check_invariants: bool = False) -> Trajectory:
    """Iterate the map ``n_steps`` times, stopping early if the state diverges."""
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if not initial.is_live:
        raise ParameterError(f"initial state is not live: {initial}")

    builder = _TrajectoryBuilder()
    state = initial
    d = derived_quantities(state, params)
    final_status, diverged_at = LIVE, None

    for index in range(n_steps):
        chi = noise.next_shock() if noise is not None else 0.0
        new_state, status = step(state, params, chi, d)
        if status.is_diverged:
            final_status, diverged_at = status, index
            logger.debug(f"Trajectory diverged at step {index}: {status.reason}")
            break
        if check_invariants:
            check_step_invariants(state, new_state, params, d)
        new_d = derived_quantities(new_state, params)
        builder.append(new_state, new_d, status, chi)
        state, d = new_state, new_d

    if builder.clamp_count:
        logger.info(f"Fund weight clamped {builder.clamp_count} times")
    return builder.build(params.tau, initial, final_status, diverged_at)
