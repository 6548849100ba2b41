import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

from stopping_thresholds.settings import MCConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

_U64 = 2**64


def _purpose_tag(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_key(value: float | int) -> int:
    """Map a grid value or index to a non-negative spawn-key entry."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value) % _U64
    return int(np.float64(value).view(np.uint64))


def substream(seed: int, purpose: str, *keys: float | int) -> np.random.Generator:
    """
    Independent generator for (seed, purpose, keys).

    Philox is counter based, so distinct spawn keys give streams that do not
    overlap and the result does not depend on which worker draws from it.
    """
    seq = np.random.SeedSequence(
        entropy=seed,
        spawn_key=(_purpose_tag(purpose), *(stream_key(k) for k in keys)),
    )
    return np.random.Generator(np.random.Philox(seq))


def block_sizes(n_paths: int, block_size: int) -> list[int]:
    full, rest = divmod(n_paths, block_size)
    return [block_size] * full + ([rest] if rest else [])


def run_blocks(
    simulate: Callable[[np.random.Generator, int], T],
    n_paths: int,
    cfg: MCConfig,
    purpose: str,
    *keys: float | int,
) -> list[T]:
    """
    Run `simulate(rng, n)` over fixed-size blocks of paths.

    Block i always draws from the substream keyed by i, and results come back
    in block order, so the merged estimate is the same for any thread count.
    """
    sizes = block_sizes(n_paths, cfg.block_size)
    jobs = [
        (substream(cfg.seed, purpose, *keys, i), n) for i, n in enumerate(sizes)
    ]
    if cfg.threads <= 1 or len(jobs) <= 1:
        return [simulate(rng, n) for rng, n in jobs]

    logger.debug(
        "Running %d blocks for '%s' on %d threads", len(jobs), purpose, cfg.threads
    )
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = [pool.submit(simulate, rng, n) for rng, n in jobs]
        return [fut.result() for fut in futures]
