"""Run configuration: ``key = value`` documents, runtime settings and their manager."""

import math
import re
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Optional

from leverage_cycle_sim.common.exceptions import ConfigError, ParameterError
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.params import ModelParams, PolicyParams
from leverage_cycle_sim.model.stochastic import GarchParams

logger = get_logger(__name__)

_MODEL = ModelParams()
_POLICY = PolicyParams()
_GARCH = GarchParams()

INT_KEYS = ("seed", "n_steps", "burn_in", "n_seeds")
OPTIONAL_KEYS = ("theta_minus",)
NONE_TOKEN = "none"


@dataclass(frozen=True)
class RunConfig:
    """Every model, shock and run setting of one invocation; absent keys take the table defaults."""

    tau: float = _MODEL.tau
    delta: float = _MODEL.delta
    t_var: float = _MODEL.t_var
    sigma0_sq: float = _POLICY.sigma0_sq
    b: float = _POLICY.b
    alpha: float = _POLICY.alpha
    e_bar: float = _MODEL.e_bar
    w_b: float = _MODEL.w_b
    theta: float = _MODEL.theta
    theta_minus: Optional[float] = _MODEL.theta_minus
    eta: float = _MODEL.eta
    mu: float = _MODEL.mu
    rho: float = _MODEL.rho
    w_f0: float = _MODEL.w_f0
    a0: float = _GARCH.a0
    a1: float = _GARCH.a1
    b1: float = _GARCH.b1
    seed: int = 1
    n_steps: int = 5000
    burn_in: int = 500
    q: float = 0.05
    lambda_hat: float = 5.8
    r_hat: float = 0.27
    n_seeds: int = 16
    plane_price: float = 20.0

    def __post_init__(self) -> None:
        self.model_params()
        self.garch_params()
        if self.seed < 0:
            raise ParameterError(f"seed must be >= 0, got {self.seed}")
        if self.n_steps < 1:
            raise ParameterError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.burn_in < 0:
            raise ParameterError(f"burn_in must be >= 0, got {self.burn_in}")
        if not 0 < self.q < 1:
            raise ParameterError(f"q must lie in (0, 1), got {self.q}")
        if not self.lambda_hat > 1:
            raise ParameterError(f"lambda_hat must be > 1, got {self.lambda_hat}")
        if not self.r_hat > 0:
            raise ParameterError(f"r_hat must be > 0, got {self.r_hat}")
        if self.n_seeds < 1:
            raise ParameterError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if not self.plane_price > 0:
            raise ParameterError(f"plane_price must be > 0, got {self.plane_price}")

    def model_params(self) -> ModelParams:
        return ModelParams(
            tau=self.tau, delta=self.delta, t_var=self.t_var,
            policy=PolicyParams(alpha=self.alpha, sigma0_sq=self.sigma0_sq, b=self.b),
            e_bar=self.e_bar, w_b=self.w_b, theta=self.theta, theta_minus=self.theta_minus,
            eta=self.eta, mu=self.mu, rho=self.rho, w_f0=self.w_f0,
        )

    def garch_params(self) -> GarchParams:
        return GarchParams(a0=self.a0, a1=self.a1, b1=self.b1)

    @property
    def is_deterministic(self) -> bool:
        return self.garch_params().is_deterministic


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))


def _parse_value(key: str, text: str, line: int):
    if key in OPTIONAL_KEYS and text.lower() == NONE_TOKEN:
        return None
    try:
        if key in INT_KEYS:
            return int(text)
        value = float(text)
    except ValueError:
        kind = "an integer" if key in INT_KEYS else "a real number"
        raise ConfigError(f"{key}: expected {kind}, got {text!r}", line=line)
    if not math.isfinite(value):
        raise ConfigError(f"{key}: value must be finite, got {text!r}", line=line)
    return value


def _line_of_failure(message: str, lines: Dict[str, int]) -> Optional[int]:
    for key, line in sorted(lines.items(), key=lambda item: item[1]):
        if re.search(rf"\b{re.escape(key)}\b", message):
            return line
    return None


def parse_config(text: str) -> RunConfig:
    """Parse a section-free ``key = value`` document; ``#`` starts a comment."""
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", line=number)
        key, value = (part.strip() for part in content.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=number)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", line=number)
        if not value:
            raise ConfigError(f"{key}: missing value", line=number)
        values[key] = _parse_value(key, value, number)
        lines[key] = number

    try:
        return RunConfig(**values)
    except ConfigError as e:
        raise ConfigError(str(e), line=_line_of_failure(str(e), lines)) from e


def serialize_config(config: RunConfig) -> str:
    """Full document with every key; reals are written in shortest round-trip form."""
    rendered: List[str] = []
    for key, value in asdict(config).items():
        if value is None:
            text = NONE_TOKEN
        elif key in INT_KEYS:
            text = str(int(value))
        else:
            text = repr(float(value))
        rendered.append(f"{key} = {text}")
    return "\n".join(rendered) + "\n"


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Error reading config {path}: {str(e)}")
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text)


@dataclass
class RuntimeSettings:
    """Execution settings that never change numeric results."""

    env_name: str = "dev"
    max_threads: int = 1
    log_level: str = "INFO"
    output_dir: str = "output"

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RuntimeSettings":
        return cls(
            env_name=raw.get("env_name", "dev"),
            max_threads=int(raw.get("max_threads", 1)),
            log_level=raw.get("log_level", "INFO"),
            output_dir=raw.get("output_dir", "output"),
        )


class RunConfigManager:
    """Hands out parameter objects and output names for one run."""

    def __init__(self, config: RunConfig, runtime: Optional[Dict[str, Any]] = None) -> None:
        self._raw_config = dict(runtime or {})
        self.config = config
        self.runtime = RuntimeSettings.from_dict(self._raw_config)
        self.env_name = self.runtime.env_name

    @property
    def raw_config(self) -> Dict[str, Any]:
        """Get the raw runtime settings dictionary."""
        return self._raw_config

    def model_params(self) -> ModelParams:
        return self.config.model_params()

    def garch_params(self) -> Optional[GarchParams]:
        """GARCH settings, or None in the deterministic limit."""
        garch = self.config.garch_params()
        return None if garch.is_deterministic else garch

    def with_overrides(self, **flags) -> "RunConfigManager":
        """Apply command-line overrides; None values are ignored."""
        changes = {k: v for k, v in flags.items() if v is not None}
        unknown = sorted(set(changes) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown override(s): {', '.join(unknown)}")
        if not changes:
            return self
        return RunConfigManager(replace(self.config, **changes), self._raw_config)

    def generate_output_name(self, command: str, suffix: str = "csv") -> str:
        """Generate a standardized output file name."""
        return f"{self.env_name}-{command}.{suffix}"
