from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

log = logging.getLogger("gridlock")


def derive_rng(master_seed: int, *index: int) -> np.random.Generator:
    """Independent stream for a replicate, keyed by (master_seed, index...)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, index)]))


def derive_seed(master_seed: int, *index: int) -> int:
    """Integer seed for a replicate; ``default_rng(derive_seed(...))`` is reproducible on its own."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, index)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    """Pass through anything generator-like; seed a new Generator otherwise."""
    if rng is None or isinstance(rng, (int, np.integer, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    return rng


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Order-preserving map; results do not depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def configure_logging(default: str = "WARNING") -> None:
    level = os.environ.get("GRIDLOCK_LOG", default).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def fmt(x) -> str:
    """CSV number formatting, 9 significant digits for floats."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def moving_average3(values: Sequence[float]) -> np.ndarray:
    """3-point centred moving average; endpoints average their two available points."""
    y = np.asarray(values, dtype=float)
    if y.size < 3:
        return y.copy()
    out = np.empty_like(y)
    out[1:-1] = (y[:-2] + y[1:-1] + y[2:]) / 3.0
    out[0] = (y[0] + y[1]) / 2.0
    out[-1] = (y[-2] + y[-1]) / 2.0
    return out
