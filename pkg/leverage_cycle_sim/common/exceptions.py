"""Error hierarchy shared by the library and the command-line surface."""

from typing import Optional

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGENCE = 2
EXIT_CALIBRATION = 3
EXIT_CONFIG = 4


class LeverageCycleError(Exception):
    """Base class for package errors."""

    exit_code = EXIT_FAILURE


class ConfigError(LeverageCycleError, ValueError):
    """Invalid configuration document or parameter value."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParameterError(ConfigError):
    """Invalid parameter object built in code."""


class DivergenceError(LeverageCycleError):
    """A trajectory left the live region (price blew up or collapsed)."""

    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        self.step = step
        super().__init__(message)


class BracketError(LeverageCycleError):
    exit_code = EXIT_DIVERGENCE


class CalibrationError(LeverageCycleError):
    exit_code = EXIT_CALIBRATION


class InsufficientCyclesError(LeverageCycleError, ValueError):
    pass


class InvalidSeriesError(LeverageCycleError, ValueError):
    pass


class EigenvalueError(LeverageCycleError):
    pass
