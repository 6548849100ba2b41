import logging
from collections import OrderedDict
from dataclasses import dataclass
from threading import RLock
from typing import Callable

import numpy as np

from stopping_thresholds.settings import MCConfig, StepDistribution

logger = logging.getLogger(__name__)

DEFAULT_MAX_ENTRIES = 8


@dataclass(frozen=True)
class PooledExcursions:
    """
    Ladder excursions of a random walk started at 0.

    Path k occupies partial_sums[starts[k] : starts[k] + lengths[k]]; its last
    entry is the ladder height S_{tau+} > 0. Censored paths are not stored.
    """

    partial_sums: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray
    simulated: int
    censored: int

    @property
    def paths(self) -> int:
        return int(self.lengths.size)

    @property
    def censored_fraction(self) -> float:
        return self.censored / self.simulated if self.simulated else 0.0

    @property
    def ladder_heights(self) -> np.ndarray:
        return self.partial_sums[self.starts + self.lengths - 1]

    def path_sums(self, values: np.ndarray) -> np.ndarray:
        """Per-path sums of `values`, one value per stored partial sum."""
        return np.add.reduceat(values, self.starts)


class ExcursionStore:
    """
    In-memory LRU cache of pooled excursions.

    Keyed by the walk, seed, path count and step cap, so every grid point of
    an f-curve reuses the same sample (common random numbers). At most
    `max_entries` samples are held; the least recently used one is dropped.
    """

    def __init__(self, max_entries: int = DEFAULT_MAX_ENTRIES) -> None:
        if max_entries < 1:
            raise ValueError("an excursion store needs room for one sample")
        self.max_entries = max_entries
        self._lock = RLock()
        self._cache: OrderedDict[tuple, PooledExcursions] = OrderedDict()

    @staticmethod
    def key(walk: StepDistribution, cfg: MCConfig) -> tuple:
        return (walk.model_dump_json(), cfg.seed, cfg.paths, cfg.max_steps)

    def get(self, walk: StepDistribution, cfg: MCConfig) -> PooledExcursions | None:
        key = self.key(walk, cfg)
        with self._lock:
            pooled = self._cache.get(key)
            if pooled is not None:
                self._cache.move_to_end(key)
            return pooled

    def get_or_simulate(
        self,
        walk: StepDistribution,
        cfg: MCConfig,
        simulate: Callable[[], PooledExcursions],
    ) -> PooledExcursions:
        key = self.key(walk, cfg)
        with self._lock:
            pooled = self._cache.get(key)
            if pooled is not None:
                self._cache.move_to_end(key)
                return pooled
            logger.debug("Simulating %d pooled excursions", cfg.paths)
            pooled = simulate()
            self._cache[key] = pooled
            while len(self._cache) > self.max_entries:
                self._cache.popitem(last=False)
            return pooled

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)
