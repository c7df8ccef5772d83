import logging
import os

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name="leverage-cycle-sim"):
    logger = logging.getLogger(name)
    logger.setLevel(os.environ.get('LOG_LEVEL', 'INFO').upper())

    return logger


def configure_root_handler(level: str = None) -> None:
    """Attach one stream handler to the package logger (used by the CLI entry)."""
    root = logging.getLogger("leverage_cycle_sim")
    if level:
        root.setLevel(level.upper())
    if not any(isinstance(h, logging.StreamHandler) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
