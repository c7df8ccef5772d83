"""Parallel evaluation of independent sweep cells."""

import concurrent.futures
import os
from typing import Callable, List, Sequence, TypeVar

from tqdm import tqdm

from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.model.stochastic import derive_seed

logger = get_logger(__name__)

Cell = TypeVar("Cell")
Result = TypeVar("Result")

THREADS_ENV_VAR = "LEVERAGE_CYCLE_THREADS"


def default_thread_count(fallback: int = 1) -> int:
    value = os.environ.get(THREADS_ENV_VAR)
    if not value:
        return fallback
    try:
        return max(1, int(value))
    except ValueError:
        logger.error(f"Ignoring {THREADS_ENV_VAR}={value!r}: not an integer")
        return fallback


def seed_list(base_seed: int, n_seeds: int, offset: int = 0) -> List[int]:
    """Seeds of ``n_seeds`` independent streams derived from ``base_seed``."""
    return [derive_seed(base_seed, offset + k) for k in range(n_seeds)]


class CellRunner:
    """Maps a pure cell function over a list of cells; result order follows input order.

    Cells step the map in pure Python and hold the GIL for most of their run, so extra threads
    mainly overlap numpy and logging work. Results never depend on the thread count.
    """

    def __init__(self, max_threads: int = 1, progress: bool = False, label: str = "cells") -> None:
        self.max_threads = max(1, int(max_threads))
        self.progress = progress
        self.label = label

    def map(self, func: Callable[[Cell], Result], cells: Sequence[Cell]) -> List[Result]:
        cells = list(cells)
        logger.info(f"Evaluating {len(cells)} {self.label} on {self.max_threads} thread(s)")
        if self.max_threads == 1 or len(cells) <= 1:
            return [func(cell) for cell in tqdm(cells, desc=self.label, disable=not self.progress)]

        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_threads) as executor:
            results = list(tqdm(executor.map(func, cells), total=len(cells), desc=self.label,
                                disable=not self.progress))
        return results
