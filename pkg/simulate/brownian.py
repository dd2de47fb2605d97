"""Refinable Brownian increments keyed by (seed, path block, level, position).

Paths are grouped in fixed blocks of ``BLOCK`` rows. Level-0 increments of a
block come from one Philox stream; every refinement level adds one Brownian
midpoint per parent increment, drawn from a stream keyed by the level and the
level-0 step it refines. Any window of any level is therefore a pure function
of its key, independent of evaluation order and worker count.
"""

import logging
import math
import threading
from collections import OrderedDict
from enum import IntEnum
from typing import Iterator

import numpy as np

from config import Config

logger = logging.getLogger(__name__)

BLOCK = 64
LEVEL0_CACHE_BLOCKS = 256


class Stream(IntEnum):
    BROWNIAN = 0
    LOOKBACK = 1
    BETA = 2
    COUPLING = 3
    FILL = 4
    ENDPOINT = 5
    SCORE = 6
    CHECK = 7


def block_generator(seed: int, stream: Stream, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(int(stream), *map(int, key)))
    return np.random.Generator(np.random.Philox(ss))


def path_blocks(n_paths: int) -> Iterator[tuple[int, int, int]]:
    """Yield (block, first_path, stop_path) covering path indices 0..n_paths-1."""
    for block in range(math.ceil(n_paths / BLOCK)):
        start = block * BLOCK
        yield block, start, min(start + BLOCK, n_paths)


def refine_increments(parent: np.ndarray, h: float, z: np.ndarray) -> np.ndarray:
    """Split each increment over a step of length ``h`` at its Brownian midpoint.

    The midpoint deviation has standard deviation √h/2; the second child is
    the parent minus the first so children sum to the parent.
    """
    first = 0.5 * parent + 0.5 * math.sqrt(h) * z
    out = np.empty(parent.shape[:-1] + (2 * parent.shape[-1],), dtype=float)
    out[..., 0::2] = first
    out[..., 1::2] = parent - first
    return out


class BrownianSource:
    """Shared refinable Brownian paths for a sweep with base step count ``N``."""

    def __init__(self, seed: int, T: float, N: int, max_steps: int | None = None):
        if N <= 0 or T <= 0:
            raise ValueError("N and T must be positive")
        self.seed = int(seed)
        self.T = float(T)
        self.N = int(N)
        self.max_steps = max_steps if max_steps is not None else Config().max_steps
        self._level0: OrderedDict[int, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def check_level(self, level: int):
        if level < 0:
            raise ValueError("level must be non-negative")
        if self.N * 2 ** level > self.max_steps:
            raise ValueError(
                f"size overflow: N*2^level = {self.N * 2 ** level} exceeds {self.max_steps}"
            )

    def level0(self, block: int) -> np.ndarray:
        with self._lock:
            cached = self._level0.get(block)
            if cached is not None:
                self._level0.move_to_end(block)
                return cached
        rng = block_generator(self.seed, Stream.BROWNIAN, block, 0, 0)
        cached = rng.standard_normal((BLOCK, self.N)) * math.sqrt(self.T / self.N)
        with self._lock:
            self._level0[block] = cached
            # least recently used blocks go first
            while len(self._level0) > LEVEL0_CACHE_BLOCKS:
                self._level0.popitem(last=False)
        return cached

    @property
    def cached_blocks(self) -> int:
        with self._lock:
            return len(self._level0)

    def window(self, block: int, level: int, k0: int) -> np.ndarray:
        """Increments at ``level`` inside level-0 step ``k0``: shape (BLOCK, 2^level)."""
        self.check_level(level)
        inc = self.level0(block)[:, k0:k0 + 1]
        h = self.T / self.N
        for j in range(1, level + 1):
            z = block_generator(self.seed, Stream.BROWNIAN, block, j, k0).standard_normal(
                (BLOCK, 2 ** (j - 1)))
            inc = refine_increments(inc, h, z)
            h *= 0.5
        return inc

    def block_increments(self, block: int, level: int) -> np.ndarray:
        """All increments of a block at ``level``: shape (BLOCK, N·2^level)."""
        self.check_level(level)
        if level == 0:
            return self.level0(block).copy()
        return np.concatenate([self.window(block, level, k0) for k0 in range(self.N)], axis=1)

    def increments(self, paths, level: int) -> np.ndarray:
        """Increments for the given path indices: shape (len(paths), N·2^level)."""
        paths = np.atleast_1d(np.asarray(paths, dtype=np.int64))
        if np.any(paths < 0):
            raise ValueError("path indices must be non-negative")
        out = np.empty((paths.size, self.N * 2 ** level))
        for block in np.unique(paths // BLOCK):
            rows = np.flatnonzero(paths // BLOCK == block)
            out[rows] = self.block_increments(int(block), level)[paths[rows] % BLOCK]
        return out

    def uniforms(self, block: int, level: int, stream: Stream = Stream.LOOKBACK) -> np.ndarray:
        """Uniform samples on (0, 1], one per step of ``level``."""
        self.check_level(level)
        rng = block_generator(self.seed, stream, block, level, self.N)
        return 1.0 - rng.random((BLOCK, self.N * 2 ** level))


def brownian_increments(seed: int, path_index: int, N: int, level: int,
                        T: float = 1.0, max_steps: int | None = None) -> np.ndarray:
    """N·2^level increments of path ``path_index`` for step T/(N·2^level)."""
    source = BrownianSource(seed, T, N, max_steps)
    return source.increments([path_index], level)[0]


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments along the last axis."""
    if factor == 1:
        return increments
    shape = increments.shape[:-1] + (increments.shape[-1] // factor, factor)
    return increments.reshape(shape).sum(axis=-1)
