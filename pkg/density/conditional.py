"""One-coarse-step conditional laws over a grid of starting points.

For a start x the law of the step is tabulated in the normalized coordinate
z = (y − x − b(x)Δ)/(σ(x)√Δ); tables for neighbouring starts are blended
linearly in x. CDFs are blended in z, quantiles in ζ = Φ⁻¹(u).
"""

import logging
import math
import threading
from typing import Literal

import numpy as np
from scipy.special import ndtr, ndtri

from density.euler_marginal import euler_kernel, first_step_density
from density.fokker_planck import fokker_planck_evolve
from density.law import MarginalLaw, MeshSpec
from model.diffusion import DiffusionModel

logger = logging.getLogger(__name__)

Kind = Literal["diffusion", "euler"]

LEVEL_CLIP = 1.0e-9
Z_LIMIT = 10.0
ZETA_LIMIT = 6.5


def _hermite(values: np.ndarray, slopes: np.ndarray, rows: np.ndarray,
             lo: float, step: float, x: np.ndarray) -> np.ndarray:
    """Cubic Hermite interpolation along the uniform grid of each selected row."""
    n = values.shape[1]
    pos = (x - lo) / step
    i = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    t = np.clip(pos - i, 0.0, 1.0)
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * values[rows, i]
            + (t3 - 2 * t2 + t) * step * slopes[rows, i]
            + (-2 * t3 + 3 * t2) * values[rows, i + 1]
            + (t3 - t2) * step * slopes[rows, i + 1])


class ConditionalLawTable:
    """CDF and quantile of X_{s+Δ} given X_s = x for one step length Δ."""

    def __init__(self, model: DiffusionModel, horizon: float, kind: Kind,
                 substeps: int, starts: np.ndarray, nodes: int = 1024,
                 width: float = Z_LIMIT, z_points: int = 801, zeta_points: int = 521):
        if not horizon > 0:
            raise ValueError(f"step length must be positive, got {horizon}")
        self.model = model
        self.horizon = float(horizon)
        self.kind = kind
        self.substeps = int(substeps)
        self.starts = np.asarray(starts, dtype=float)
        self.closed_form = (kind == "diffusion" and model.exact_law is not None) or (
            model.constant_coefficients)
        if self.closed_form:
            return

        self.z = np.linspace(-width, width, z_points)
        self.zeta = np.linspace(-ZETA_LIMIT, ZETA_LIMIT, zeta_points)
        levels = ndtr(self.zeta)
        k = self.starts.size
        self.cdf_values = np.empty((k, z_points))
        self.cdf_slopes = np.empty((k, z_points))
        self.q_values = np.empty((k, zeta_points))
        self.q_slopes = np.empty((k, zeta_points))
        centers, scales = self._frame(self.starts)
        for j, (x, c, s) in enumerate(zip(self.starts, centers, scales)):
            law = self._law(float(x), float(c), float(s), nodes, width)
            y = c + s * self.z
            self.cdf_values[j] = law.cdf_at(y)
            self.cdf_slopes[j] = law.density_at(y) * s
            self.q_values[j] = (law.quantile(levels) - c) / s
            self.q_slopes[j] = np.gradient(self.q_values[j], self.zeta, edge_order=2)
        logger.info("Tabulated %s conditional laws for %s: step %.4g, %d starts",
                    kind, model.describe(), self.horizon, k)

    def _frame(self, x):
        x = np.asarray(x, dtype=float)
        center = x + self.model.b(x) * self.horizon
        scale = self.model.s(x) * math.sqrt(self.horizon)
        return center, scale

    def _law(self, x: float, c: float, s: float, nodes: int, width: float) -> MarginalLaw:
        mesh = MeshSpec(c - width * s, c + width * s, nodes)
        if self.kind == "diffusion":
            return fokker_planck_evolve(self.model, self.horizon, mesh,
                                        steps=max(64, self.substeps), x0=x).laws[-1]
        points = mesh.points()
        dt = self.horizon / self.substeps
        p = first_step_density(self.model, points, dt, x)
        if self.substeps > 1:
            kernel = euler_kernel(self.model, points, dt)
            for _ in range(self.substeps - 1):
                p = kernel @ p
        return MarginalLaw.from_density(points, p, self.horizon)

    def _locate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        j = np.clip(np.searchsorted(self.starts, x) - 1, 0, self.starts.size - 2)
        span = self.starts[j + 1] - self.starts[j]
        w = np.clip((x - self.starts[j]) / span, 0.0, 1.0)
        return j, w

    def _gaussian(self, x, z_or_u, inverse: bool):
        m = self.model
        if self.kind == "diffusion" and m.exact_law is not None:
            law = m.exact_law
            return law.ppf(self.horizon, x, z_or_u) if inverse else law.cdf(self.horizon, x, z_or_u)
        c, s = self._frame(x)
        return c + s * ndtri(z_or_u) if inverse else ndtr((z_or_u - c) / s)

    def cdf(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        if self.closed_form:
            return self._gaussian(x, y, inverse=False)
        c, s = self._frame(x)
        z = (y - c) / s
        j, w = self._locate(x)
        lo, step = self.z[0], self.z[1] - self.z[0]
        v = ((1.0 - w) * _hermite(self.cdf_values, self.cdf_slopes, j, lo, step, z)
             + w * _hermite(self.cdf_values, self.cdf_slopes, j + 1, lo, step, z))
        v = np.where(z <= self.z[0], 0.0, v)
        v = np.where(z >= self.z[-1], 1.0, v)
        return np.clip(v, 0.0, 1.0)

    def quantile(self, x, u) -> np.ndarray:
        x, u = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        if np.any(~(u > 0.0)) or np.any(~(u < 1.0)):
            raise ValueError("quantile level must lie in the open interval (0, 1)")
        if self.closed_form:
            return self._gaussian(x, u, inverse=True)
        c, s = self._frame(x)
        zeta = np.clip(ndtri(u), self.zeta[0], self.zeta[-1])
        j, w = self._locate(x)
        lo, step = self.zeta[0], self.zeta[1] - self.zeta[0]
        q = ((1.0 - w) * _hermite(self.q_values, self.q_slopes, j, lo, step, zeta)
             + w * _hermite(self.q_values, self.q_slopes, j + 1, lo, step, zeta))
        return c + s * q


def start_grid(model: DiffusionModel, horizon: float, points: int = 257,
               width: float = 8.0) -> np.ndarray:
    lo, hi = model.support(horizon, width)
    if model.log_scale:
        return np.geomspace(lo, hi, points)
    return np.linspace(lo, hi, points)


class ConditionalLaws:
    """Shared, lazily built tables keyed by (kind, number of fine steps)."""

    def __init__(self, model: DiffusionModel, dt: float, starts: np.ndarray,
                 nodes: int = 1024):
        self.model = model
        self.dt = float(dt)
        self.starts = starts
        self.nodes = nodes
        self._tables: dict[tuple[str, int], ConditionalLawTable] = {}
        self._lock = threading.Lock()

    def table(self, kind: Kind, steps: int) -> ConditionalLawTable:
        key = (kind, int(steps))
        with self._lock:
            cached = self._tables.get(key)
        if cached is not None:
            return cached
        built = ConditionalLawTable(self.model, steps * self.dt, kind, steps,
                                    self.starts, nodes=self.nodes)
        with self._lock:
            return self._tables.setdefault(key, built)

    def couple(self, steps: int, x_left, x_right, y_left) -> tuple[np.ndarray, int]:
        """Quantile image of x_right under the Euler step law from y_left.

        Returns the coupled values and the number of levels clipped away from {0, 1}.
        """
        u = self.table("diffusion", steps).cdf(x_left, x_right)
        clipped = int(np.count_nonzero((u < LEVEL_CLIP) | (u > 1.0 - LEVEL_CLIP)))
        u = np.clip(u, LEVEL_CLIP, 1.0 - LEVEL_CLIP)
        return self.table("euler", steps).quantile(y_left, u), clipped
