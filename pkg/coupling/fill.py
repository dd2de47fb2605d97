"""Euler-chain bridges between coupled coarse values.

Between two coarse nodes the Euler chain is conditioned on both endpoints.
A backward recursion computes, in log space, the density h_j(x) of hitting
the right endpoint from x at fine step j, on a small normalized mesh per
step. The interior values are then drawn forward from p̄(x_{j−1}, ·)·h_j(·)
by inverse-CDF sampling on a window around the product Gaussian.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from model.diffusion import DiffusionModel
from simulate.brownian import Stream, block_generator
from simulate.euler import GridSpec

logger = logging.getLogger(__name__)

WINDOW_POINTS = 121
WINDOW_WIDTH = 10.0


@dataclass
class FillResult:
    values: np.ndarray
    failed: list[tuple[int, int]] = field(default_factory=list)

    @property
    def failed_rows(self) -> np.ndarray:
        rows = np.zeros(self.values.shape[0], dtype=bool)
        for r, _ in self.failed:
            rows[r] = True
        return rows


def log_transition(model: DiffusionModel, x, y, dt: float):
    """log p̄(x, y) for one Euler step of length dt."""
    var = model.a(x) * dt
    d = y - x - model.b(x) * dt
    out = -0.5 * d * d / var - 0.5 * np.log(2.0 * math.pi * var)
    return np.where(model.in_domain(y), out, -np.inf)


def _interp_rows(lo: np.ndarray, step: np.ndarray, table: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation on uniform grids, extrapolating linearly."""
    pos = (x - lo[:, None]) / step[:, None]
    i = np.clip(np.floor(pos).astype(np.int64), 0, table.shape[1] - 2)
    t = pos - i
    v0 = np.take_along_axis(table, i, axis=1)
    v1 = np.take_along_axis(table, i + 1, axis=1)
    return v0 + t * (v1 - v0)


def _sample_rows(window: np.ndarray, log_f: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from unnormalized log densities on per-row windows."""
    top = log_f.max(axis=1, keepdims=True)
    f = np.exp(log_f - top)
    cdf = np.zeros_like(f)
    cdf[:, 1:] = np.cumsum(0.5 * (f[:, 1:] + f[:, :-1]) * np.diff(window, axis=1), axis=1)
    target = u * cdf[:, -1]
    idx = np.clip((cdf < target[:, None]).sum(axis=1), 1, window.shape[1] - 1)
    left = idx - 1
    c0 = np.take_along_axis(cdf, left[:, None], axis=1)[:, 0]
    c1 = np.take_along_axis(cdf, idx[:, None], axis=1)[:, 0]
    x0 = np.take_along_axis(window, left[:, None], axis=1)[:, 0]
    x1 = np.take_along_axis(window, idx[:, None], axis=1)[:, 0]
    span = c1 - c0
    frac = np.where(span > 0.0, (target - c0) / np.where(span > 0.0, span, 1.0), 0.5)
    return x0 + frac * (x1 - x0)


def fill_interval(model: DiffusionModel, left: np.ndarray, right: np.ndarray, steps: int,
                  dt: float, u: np.ndarray, nodes: int = 48,
                  width: float = 8.0) -> tuple[np.ndarray, np.ndarray]:
    """Sample Euler-chain bridges left → right over ``steps`` fine steps.

    Returns values of shape (rows, steps + 1) and a mask of rows whose
    h-recursion underflowed.
    """
    rows = left.size
    out = np.empty((rows, steps + 1))
    out[:, 0] = left
    out[:, -1] = right
    if steps == 1:
        return out, np.zeros(rows, dtype=bool)

    j = np.arange(1, steps)
    scale2 = np.maximum.reduce([model.a(left), model.a(right), model.a(0.5 * (left + right))])
    centers = left[:, None] + (j / steps) * (right - left)[:, None]
    std = np.sqrt(scale2[:, None] * dt * j * (steps - j) / steps)
    z = np.linspace(-width, width, nodes)
    meshes = centers[..., None] + std[..., None] * z
    lo = meshes[..., 0]
    step = std * (z[1] - z[0])
    log_w = np.zeros(nodes)
    log_w[[0, -1]] = math.log(0.5)

    log_h = np.empty_like(meshes)
    log_h[:, -1] = log_transition(model, meshes[:, -1], right[:, None], dt)
    for i in range(steps - 3, -1, -1):
        x = meshes[:, i, :, None]
        nxt = meshes[:, i + 1, None, :]
        terms = (log_transition(model, x, nxt, dt) + log_h[:, i + 1, None, :]
                 + log_w + np.log(step[:, i + 1])[:, None, None])
        log_h[:, i] = logsumexp(terms, axis=2)

    grid = np.linspace(-WINDOW_WIDTH, WINDOW_WIDTH, WINDOW_POINTS)
    failed = np.zeros(rows, dtype=bool)
    prev = left.copy()
    for i in range(steps - 1):
        remaining = (steps - 1 - i) * dt
        a_prev, b_prev = model.a(prev), model.b(prev)
        v1, m1 = a_prev * dt, prev + b_prev * dt
        v2, m2 = a_prev * remaining, right - b_prev * remaining
        var = 1.0 / (1.0 / v1 + 1.0 / v2)
        mean = var * (m1 / v1 + m2 / v2)
        window = mean[:, None] + np.sqrt(var)[:, None] * grid
        log_f = log_transition(model, prev[:, None], window, dt)
        if i == steps - 2:
            log_f = log_f + log_transition(model, window, right[:, None], dt)
        else:
            log_f = log_f + _interp_rows(lo[:, i], step[:, i], log_h[:, i], window)
        bad = ~np.isfinite(log_f.max(axis=1))
        failed |= bad
        log_f[bad] = 0.0
        prev = _sample_rows(window, log_f, u[:, i])
        out[:, i + 1] = prev
    out[failed, 1:-1] = np.nan
    return out, failed


def euler_bridge_fill(model: DiffusionModel, grid: GridSpec, coarse: np.ndarray, seed: int,
                      block: int = 0, nodes: int = 48, width: float = 8.0) -> FillResult:
    """Fine-grid Euler values conditioned on the coupled coarse values.

    Intervals are filled independently; uniforms come from the FILL stream
    keyed by (block, interval).
    """
    coarse = np.atleast_2d(coarse)
    rows = coarse.shape[0]
    values = np.empty((rows, grid.N + 1))
    idx = grid.coarse_indices
    values[:, idx] = coarse
    result = FillResult(values=values)
    for l in range(grid.n):
        k = grid.interval_steps(l)
        if k == 1:
            continue
        rng = block_generator(seed, Stream.FILL, block, l)
        u = rng.random((rows, k - 1))
        live = np.isfinite(coarse[:, l]) & np.isfinite(coarse[:, l + 1])
        segment = np.full((rows, k + 1), np.nan)
        if live.any():
            filled, failed = fill_interval(model, coarse[live, l], coarse[live, l + 1], k,
                                           grid.dt, u[live], nodes, width)
            segment[live] = filled
            for r in np.flatnonzero(live)[failed]:
                result.failed.append((int(r), l))
        values[:, idx[l]:idx[l + 1] + 1] = segment
        values[:, idx[l]] = coarse[:, l]
        values[:, idx[l + 1]] = coarse[:, l + 1]
    if result.failed:
        logger.warning("Bridge fill: h underflow on %d (path, interval) pairs", len(result.failed))
    return result
