"""Parameter and state records for the bank/fund map.

Defaults follow the reference parameter table of the model (time step of a tenth of a
year, Basel-II-like procyclical policy with b = -0.5, fundamental value 25).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from leverage_cycle_sim.common.exceptions import ParameterError

STATE_FIELDS = ("sigma_sq", "w_f", "p", "n", "l_b", "p_lag")
W_F_INDEX = STATE_FIELDS.index("w_f")


@dataclass(frozen=True)
class PolicyParams:
    """Leverage-control policy F(sigma^2) = alpha * (sigma^2 + sigma0_sq) ** b."""

    alpha: float = 0.075
    sigma0_sq: float = 1e-6
    b: float = -0.5

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not self.sigma0_sq > 0:
            raise ParameterError(f"sigma0_sq must be > 0, got {self.sigma0_sq}")
        if not -0.5 <= self.b <= 0.5:
            raise ParameterError(f"b must lie in [-0.5, 0.5], got {self.b}")

    @property
    def leverage_cap(self) -> float:
        """alpha * sigma0_sq ** b: the target leverage at zero perceived risk."""
        return self.alpha * self.sigma0_sq ** self.b


@dataclass(frozen=True)
class ModelParams:
    tau: float = 0.1
    delta: float = 0.5
    t_var: float = 0.1
    policy: PolicyParams = PolicyParams()
    e_bar: float = 2.27
    w_b: float = 0.3
    theta: float = 9.5
    theta_minus: Optional[float] = None
    eta: float = 10.0
    mu: float = 25.0
    rho: float = 0.1
    w_f0: float = 0.5

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.tau * self.delta < 1:
            raise ParameterError(f"tau*delta must lie in (0, 1), got {self.tau * self.delta}")
        if not 0 < self.tau * self.rho < 1:
            raise ParameterError(f"tau*rho must lie in (0, 1), got {self.tau * self.rho}")
        if not self.t_var > 0:
            raise ParameterError(f"t_var must be > 0, got {self.t_var}")
        rates = {"theta": self.theta, "eta": self.eta}
        if self.theta_minus is not None:
            rates["theta_minus"] = self.theta_minus
        negative = sorted(name for name, value in rates.items() if not value >= 0)
        if negative:
            raise ParameterError(f"rates must be nonnegative: {', '.join(negative)}")
        if not self.mu > 0:
            raise ParameterError(f"mu must be > 0, got {self.mu}")
        if not self.e_bar >= 0:
            raise ParameterError(f"e_bar must be >= 0, got {self.e_bar}")
        if not 0 < self.w_b <= 1:
            raise ParameterError(f"w_b must lie in (0, 1], got {self.w_b}")
        if not 0 < self.w_f0 < 1:
            raise ParameterError(f"w_f0 must lie in (0, 1), got {self.w_f0}")

    @property
    def theta_down(self) -> float:
        """Adjustment speed used while the bank deleverages."""
        return self.theta if self.theta_minus is None else self.theta_minus

    @property
    def t_delta(self) -> float:
        """Time after which an observation's weight in the variance estimate decays to 1/e."""
        return -self.tau / math.log(1.0 - self.tau * self.delta)

    def with_policy(self, **changes) -> "ModelParams":
        return replace(self, policy=replace(self.policy, **changes))

    def with_changes(self, **changes) -> "ModelParams":
        policy_keys = {f.name for f in fields(PolicyParams)}
        policy_changes = {k: changes.pop(k) for k in list(changes) if k in policy_keys}
        params = replace(self, **changes) if changes else self
        return params.with_policy(**policy_changes) if policy_changes else params


def rescale_timestep(params: ModelParams, tau: float) -> ModelParams:
    """Same per-year rates on a different time grid (for continuum-limit comparisons)."""
    return replace(params, tau=tau)


@dataclass(frozen=True)
class State:
    """The state vector x(t) iterated by the map."""

    sigma_sq: float
    w_f: float
    p: float
    n: float
    l_b: float
    p_lag: float

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.sigma_sq, self.w_f, self.p, self.n, self.l_b, self.p_lag], dtype=float)

    @classmethod
    def from_array(cls, values) -> "State":
        values = [float(v) for v in values]
        if len(values) != len(STATE_FIELDS):
            raise ParameterError(f"state vector needs {len(STATE_FIELDS)} entries, got {len(values)}")
        return cls(*values)

    @property
    def is_live(self) -> bool:
        return (
            all(math.isfinite(v) for v in (self.sigma_sq, self.w_f, self.p, self.n, self.l_b, self.p_lag))
            and self.p > 0
            and self.p_lag > 0
        )
