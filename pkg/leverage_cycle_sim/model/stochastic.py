"""Clustered-volatility shocks for the fund's portfolio weight.

The fund's weight receives chi(t) = s(t) * xi(t), where xi is standard normal and the
variance s^2 follows a GARCH(1,1) recursion

    s^2(t) = a0 + a1 * chi(t-1)^2 + b1 * s^2(t-1)

with t-1 read as the previous map iteration. Every stream is seeded so that a run can be
replayed bit for bit, which the common-noise Lyapunov estimators rely on.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from leverage_cycle_sim.common.exceptions import LeverageCycleError, ParameterError
from leverage_cycle_sim.common.logger import get_logger

logger = get_logger(__name__)

SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class GarchParams:
    a0: float = 1e-3
    a1: float = 0.016
    b1: float = 0.87

    def __post_init__(self) -> None:
        negative = [name for name in ("a0", "a1", "b1") if not getattr(self, name) >= 0]
        if negative:
            raise ParameterError(f"GARCH weights must be nonnegative: {', '.join(negative)}")
        if not self.is_stationary:
            message = f"GARCH a1 + b1 = {self.a1 + self.b1} >= 1, process is not stationary"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning, stacklevel=2)

    @property
    def is_stationary(self) -> bool:
        return self.a1 + self.b1 < 1

    @property
    def is_deterministic(self) -> bool:
        """a0 = 0 keeps every shock at zero whatever a1 and b1 are."""
        return self.a0 == 0

    @property
    def stationary_variance(self) -> float:
        """Long-run mean of chi^2, a0 / (1 - a1 - b1); a0 when the process is not stationary."""
        return self.a0 / (1.0 - self.a1 - self.b1) if self.is_stationary else self.a0


DETERMINISTIC = GarchParams(a0=0.0, a1=0.0, b1=0.0)


@dataclass(frozen=True)
class GarchState:
    s_sq: float
    chi_prev: float = 0.0

    def __post_init__(self) -> None:
        if not self.s_sq >= 0:
            raise ParameterError(f"GARCH variance must be >= 0, got {self.s_sq}")

    @classmethod
    def initial(cls, params: GarchParams) -> "GarchState":
        return cls(s_sq=params.stationary_variance, chi_prev=0.0)


def derive_seed(base_seed: int, cell_index: int) -> int:
    """Seed of an independent sub-stream: base_seed XOR cell_index on 64 bits."""
    return (int(base_seed) ^ int(cell_index)) & SEED_MASK


class ShockStream:
    """Seeded source of standard normal draws.

    Two streams built from the same seed produce the same sequence, so any consumer can
    replay the exact draws another one saw.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ParameterError(f"seed must be >= 0, got {seed}")
        self.seed = int(seed) & SEED_MASK
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self) -> float:
        return float(self._rng.standard_normal())

    def normals(self, size: int) -> NDArray[np.float64]:
        return self._rng.standard_normal(size)

    def replay(self) -> "ShockStream":
        """A fresh stream positioned at the start of this stream's sequence."""
        return ShockStream(self.seed)


def make_stream(seed: int) -> ShockStream:
    return ShockStream(seed)


def garch_step(state: GarchState, params: GarchParams, rng: ShockStream) -> Tuple[float, GarchState]:
    s_sq = params.a0 + params.a1 * state.chi_prev ** 2 + params.b1 * state.s_sq
    chi = math.sqrt(s_sq) * rng.standard_normal()
    return chi, GarchState(s_sq=s_sq, chi_prev=chi)


class ZeroShocks:
    """Deterministic limit: chi is identically zero."""

    def next_shock(self) -> float:
        return 0.0


class GarchShocks:
    """GARCH(1,1) shock source that records what it hands out."""

    def __init__(self, params: GarchParams, stream: ShockStream, state: Optional[GarchState] = None) -> None:
        self.params = params
        self.stream = stream
        self.state = state if state is not None else GarchState.initial(params)
        self.history: List[float] = []

    def next_shock(self) -> float:
        chi, self.state = garch_step(self.state, self.params, self.stream)
        self.history.append(chi)
        return chi

    def draw(self, size: int) -> NDArray[np.float64]:
        return np.array([self.next_shock() for _ in range(size)], dtype=float)


class RecordedShocks:
    """Replays a fixed shock sequence."""

    def __init__(self, values: Sequence[float]) -> None:
        self.values = [float(v) for v in values]
        self._position = 0

    def next_shock(self) -> float:
        if self._position >= len(self.values):
            raise LeverageCycleError(f"recorded shock sequence exhausted after {len(self.values)} draws")
        value = self.values[self._position]
        self._position += 1
        return value


def shock_source(garch: Optional[GarchParams], seed: int):
    """Zero shocks for the deterministic limit, a seeded GARCH source otherwise."""
    if garch is None or garch.is_deterministic:
        return ZeroShocks()
    return GarchShocks(garch, make_stream(seed))


def shock_path(garch: Optional[GarchParams], seed: int, size: int) -> NDArray[np.float64]:
    """The first ``size`` shocks a run with this seed will consume."""
    source = shock_source(garch, seed)
    return np.array([source.next_shock() for _ in range(size)], dtype=float)
