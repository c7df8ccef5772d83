"""Ex-post risk of the bank and statistics of the price cycle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.signal import find_peaks

from leverage_cycle_sim.common.exceptions import InsufficientCyclesError, InvalidSeriesError, ParameterError
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.core import Trajectory

logger = get_logger(__name__)

PROMINENCE_FRACTION = 0.1
MIN_PEAKS = 3
MIN_SPAN_YEARS = 50.0
DEFAULT_PLANE_PRICE = 20.0


@dataclass(frozen=True)
class ReturnSeries:
    values: NDArray[np.float64]
    tau: float

    def __len__(self) -> int:
        return len(self.values)

    @property
    def is_valid(self) -> bool:
        return len(self.values) >= 1 and bool(np.all(np.isfinite(self.values)))


@dataclass(frozen=True)
class RiskScore:
    rs_q: float
    q: float
    t_len: int


def equity_returns(traj: Trajectory) -> ReturnSeries:
    """l(t) = log((E_B(t) + n(t) dp(t)) / E_B(t)) with dp(t) = p(t+1) - p(t).

    Entries where the argument of the log is not positive (losses beyond equity) are NaN.
    """
    if len(traj) < 2:
        raise InvalidSeriesError(f"need at least 2 live steps for returns, got {len(traj)}")
    equity = traj.columns["equity"][:-1]
    n = traj.coordinate("n")[:-1]
    dp = np.diff(traj.prices)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (equity + n * dp) / equity
        values = np.where((equity > 0) & (ratio > 0), np.log(np.where(ratio > 0, ratio, 1.0)), np.nan)
    return ReturnSeries(values=values, tau=traj.tau)


def _tail_count(q: float, t_len: int) -> int:
    if not 0 < q < 1:
        raise ParameterError(f"q must lie in (0, 1), got {q}")
    count = round(q * t_len)
    if count < 1 or abs(q * t_len - count) > 1e-9 * max(1.0, q * t_len):
        raise ParameterError(f"q * T must be a positive integer, got q={q}, T={t_len}")
    return int(count)


def realized_shortfall(series: ReturnSeries, q: float) -> RiskScore:
    """Negated mean of the q*T worst returns."""
    if not series.is_valid:
        raise InvalidSeriesError("return series contains non-finite entries")
    count = _tail_count(q, len(series))
    worst = np.sort(series.values, kind="stable")[:count]
    return RiskScore(rs_q=-math.fsum(worst) / count, q=q, t_len=len(series))


def _qualifying_peaks(prices: NDArray[np.float64], prominence_fraction: float) -> NDArray[np.int64]:
    span = float(np.ptp(prices)) if len(prices) else 0.0
    if span <= 0:
        return np.array([], dtype=int)
    peaks, _ = find_peaks(prices, prominence=prominence_fraction * span)
    return peaks


def cycle_period(prices, tau: float, prominence_fraction: float = PROMINENCE_FRACTION,
                 min_years: float = MIN_SPAN_YEARS) -> float:
    """Mean spacing (years) between prominent price peaks."""
    prices = np.asarray(prices, dtype=float)
    if len(prices) * tau < min_years:
        raise InsufficientCyclesError(f"need {min_years} years of prices, got {len(prices) * tau:.1f}")
    peaks = _qualifying_peaks(prices, prominence_fraction)
    if len(peaks) < MIN_PEAKS:
        raise InsufficientCyclesError(f"found {len(peaks)} qualifying peaks, need {MIN_PEAKS}")
    return float(np.mean(np.diff(peaks))) * tau


def peak_to_trough(prices, prominence_fraction: float = PROMINENCE_FRACTION) -> float:
    """Average over detected cycles of peak price / following trough price; 1 without cycles."""
    prices = np.asarray(prices, dtype=float)
    if len(prices) == 0 or np.any(prices <= 0):
        raise InvalidSeriesError("peak-to-trough needs a nonempty series of positive prices")
    peaks = _qualifying_peaks(prices, prominence_fraction)
    if len(peaks) == 0:
        return 1.0
    bounds = list(peaks[1:]) + [len(prices)]
    ratios = [prices[peak] / prices[peak:end].min() for peak, end in zip(peaks, bounds)]
    return float(np.mean(ratios))


def poincare_section(traj: Trajectory, plane_price: float = DEFAULT_PLANE_PRICE,
                     direction: str = "up") -> NDArray[np.float64]:
    """(n, sigma^2) where the price crosses ``plane_price``, interpolated linearly.

    Upward crossings satisfy p(t) < plane <= p(t + tau). The step out of ``traj.initial`` counts.
    """
    if direction not in ("up", "down"):
        raise ParameterError(f"direction must be 'up' or 'down', got {direction!r}")
    start = traj.initial
    prices = np.concatenate([[start.p], traj.prices])
    if len(prices) < 2:
        return np.empty((0, 2))
    before, after = prices[:-1], prices[1:]
    if direction == "up":
        hits = np.flatnonzero((before < plane_price) & (plane_price <= after))
    else:
        hits = np.flatnonzero((before > plane_price) & (plane_price >= after))
    if len(hits) == 0:
        return np.empty((0, 2))
    fraction = (plane_price - before[hits]) / (after[hits] - before[hits])
    n = np.concatenate([[start.n], traj.coordinate("n")])
    sigma_sq = np.concatenate([[start.sigma_sq], traj.coordinate("sigma_sq")])
    points = np.column_stack([
        n[hits] + fraction * (n[hits + 1] - n[hits]),
        sigma_sq[hits] + fraction * (sigma_sq[hits + 1] - sigma_sq[hits]),
    ])
    logger.debug(f"Poincare section at p={plane_price}: {len(points)} crossings")
    return points
