import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from errors import DomainExitError, ModelError
from model.diffusion import DiffusionModel

logger = logging.getLogger(__name__)

ExitPolicy = Literal["raise", "censor"]


def default_coarse_factor(N: int) -> int:
    """m = ⌈N^{2/3}⌉, guarded against round-off for perfect cubes."""
    return max(1, min(N, math.ceil(N ** (2.0 / 3.0) - 1e-9)))


@dataclass(frozen=True)
class GridSpec:
    """Fine grid t_k = kT/N and coarse grid s_l = l·m·T/N with s_n = T."""
    T: float
    N: int
    m: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.N <= 0:
            raise ValueError(f"N must be positive, got {self.N}")
        if not 1 <= self.m <= self.N:
            raise ValueError(f"coarse factor m must lie in [1, N], got {self.m}")

    @classmethod
    def with_default_m(cls, T: float, N: int) -> "GridSpec":
        return cls(T=T, N=N, m=default_coarse_factor(N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def n(self) -> int:
        return self.N // self.m

    @property
    def fine_times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def coarse_indices(self) -> np.ndarray:
        idx = np.arange(self.n + 1) * self.m
        idx[-1] = self.N
        return idx

    @property
    def coarse_times(self) -> np.ndarray:
        return self.fine_times[self.coarse_indices]

    def interval_steps(self, l: int) -> int:
        idx = self.coarse_indices
        return int(idx[l + 1] - idx[l])

    def level_of(self, steps: int) -> int:
        """Refinement level L such that steps = N·2^L."""
        ratio, rem = divmod(steps, self.N)
        if rem or ratio <= 0 or ratio & (ratio - 1):
            raise ValueError(f"{steps} steps is not N·2^L for N={self.N}")
        return ratio.bit_length() - 1


@dataclass
class PathBundle:
    """Sampled paths on the fine grid, possibly refined by 2^level per step.

    ``values`` has shape (rows, N·2^level + 1), ``increments`` the matching
    driving increments. Rows that left the domain are censored and carry NaN
    from the exit step on.
    """
    grid: GridSpec
    values: np.ndarray
    increments: np.ndarray
    level: int = 0
    label: str = "euler"
    lineage: tuple[int, ...] = ()
    exit_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    offset: float = 0.0

    @property
    def censored(self) -> np.ndarray:
        if self.exit_steps.size == 0:
            return np.zeros(self.values.shape[0], dtype=bool)
        return self.exit_steps >= 0

    @property
    def step(self) -> float:
        return self.grid.dt / 2 ** self.level

    def grid_values(self) -> np.ndarray:
        """Values at the nodes t_k of the fine grid."""
        return self.values[:, :: 2 ** self.level]

    def coarse_values(self) -> np.ndarray:
        return self.grid_values()[:, self.grid.coarse_indices]

    def times(self) -> np.ndarray:
        return self.offset + np.linspace(0.0, self.grid.T, self.values.shape[1])


def _as_rows(increments) -> np.ndarray:
    inc = np.asarray(increments, dtype=float)
    return inc[None, :] if inc.ndim == 1 else inc


def _start(model: DiffusionModel, rows: int, x0) -> np.ndarray:
    start = model.x0 if x0 is None else x0
    return np.broadcast_to(np.asarray(start, dtype=float), (rows,)).copy()


def euler_path(model: DiffusionModel, grid: GridSpec, increments, x0=None,
               on_exit: ExitPolicy = "raise", lineage: tuple[int, ...] = ()) -> PathBundle:
    """Euler scheme X̄_{k+1} = X̄_k + σ(X̄_k)ΔW_k + b(X̄_k)Δ driven by ``increments``.

    ``increments`` may be one path or a (rows, steps) array; steps = N·2^L runs
    the scheme on the refined grid.
    """
    inc = _as_rows(increments)
    rows, steps = inc.shape
    level = grid.level_of(steps)
    dt = grid.T / steps
    values = np.empty((rows, steps + 1))
    x = _start(model, rows, x0)
    values[:, 0] = x
    alive = np.ones(rows, dtype=bool)
    exit_steps = np.full(rows, -1, dtype=np.int64)
    for k in range(steps):
        x = x + model.s(x) * inc[:, k] + model.b(x) * dt
        left = alive & ~model.in_domain(x)
        if left.any():
            if on_exit == "raise":
                raise DomainExitError(k + 1, float(x[left][0]))
            exit_steps[left] = k + 1
            alive &= ~left
            x = np.where(alive, x, np.nan)
        values[:, k + 1] = x
    if not alive.all():
        logger.info("Euler scheme for %s: %d of %d paths left the domain",
                    model.describe(), int((~alive).sum()), rows)
    return PathBundle(grid=grid, values=values, increments=inc, level=level,
                      label="euler", lineage=lineage, exit_steps=exit_steps)


def euler_interpolate(model: DiffusionModel, x_left, dw_partial, elapsed: float):
    """Continuous Euler interpolation X̄_t = X̄_{t_k} + σ(X̄_{t_k})(W_t − W_{t_k}) + b(X̄_{t_k})(t − t_k)."""
    x_left = np.asarray(x_left, dtype=float)
    return x_left + model.s(x_left) * np.asarray(dw_partial) + model.b(x_left) * elapsed


def euler_on_refined_grid(model: DiffusionModel, bundle: PathBundle,
                          fine_increments: np.ndarray) -> np.ndarray:
    """Evaluate the continuous Euler interpolation of ``bundle`` at refined nodes.

    ``fine_increments`` refine the bundle's increments by an integer power of
    two; coefficients stay frozen at each step's left node.
    """
    inc = _as_rows(fine_increments)
    rows, fine_steps = inc.shape
    coarse_steps = bundle.values.shape[1] - 1
    factor, rem = divmod(fine_steps, coarse_steps)
    if rem or factor & (factor - 1):
        raise ValueError("fine increments do not refine the bundle grid dyadically")
    left = bundle.values[:, :-1]
    w = np.cumsum(inc.reshape(rows, coarse_steps, factor), axis=2)
    elapsed = np.arange(1, factor + 1) * (bundle.grid.T / fine_steps)
    inner = (left[..., None] + model.s(left)[..., None] * w
             + model.b(left)[..., None] * elapsed)
    out = np.empty((rows, fine_steps + 1))
    out[:, 0] = bundle.values[:, 0]
    out[:, 1:] = inner.reshape(rows, fine_steps)
    return out


def exact_path(model: DiffusionModel, grid: GridSpec, increments,
               proxy_level: int | None = None, x0=None,
               lineage: tuple[int, ...] = ()) -> PathBundle:
    """Reference process driven by the same increments as the Euler scheme.

    With an exact law every step is an exact transition using the supplied
    Gaussian increment as noise. Otherwise the increments must sit at
    ``proxy_level`` and a fine Euler proxy is returned, labeled as such.
    """
    inc = _as_rows(increments)
    rows, steps = inc.shape
    level = grid.level_of(steps)
    if model.exact_law is None:
        if proxy_level is None:
            raise ModelError(
                f"{model.describe()} has no exact law and no proxy level is configured")
        if level != proxy_level:
            raise ValueError(f"proxy expects increments at level {proxy_level}, got {level}")
        bundle = euler_path(model, grid, inc, x0=x0, on_exit="censor", lineage=lineage)
        bundle.label = f"proxy(level={level})"
        return bundle
    dt = grid.T / steps
    values = np.empty((rows, steps + 1))
    x = _start(model, rows, x0)
    values[:, 0] = x
    for k in range(steps):
        x = model.exact_law.step(x, dt, inc[:, k])
        values[:, k + 1] = x
    return PathBundle(grid=grid, values=values, increments=inc, level=level,
                      label="exact", lineage=lineage,
                      exit_steps=np.full(rows, -1, dtype=np.int64))
