import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicHermiteSpline, CubicSpline, PchipInterpolator

from model.diffusion import DiffusionModel

logger = logging.getLogger(__name__)

MASS_TOL = 1.0e-8
NEWTON_POLISH = 2


@dataclass(frozen=True)
class MeshSpec:
    """Uniform mesh on [lo, hi] with ``nodes`` points."""
    lo: float
    hi: float
    nodes: int = 4096

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"mesh bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.nodes < 16:
            raise ValueError("mesh needs at least 16 nodes")

    @classmethod
    def for_model(cls, model: DiffusionModel, horizon: float, width: float = 8.0,
                  nodes: int = 4096) -> "MeshSpec":
        """x0 ± width·σ(x0)·√horizon (multiplicative band for log-scale models)."""
        lo, hi = model.support(horizon, width)
        return cls(lo, hi, nodes)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.nodes - 1)

    @property
    def tolerance(self) -> float:
        return self.step

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.nodes)


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    w = np.empty_like(x)
    dx = np.diff(x)
    w[0] = dx[0] / 2
    w[-1] = dx[-1] / 2
    w[1:-1] = (dx[:-1] + dx[1:]) / 2
    return w


@dataclass(frozen=True)
class MarginalLaw:
    """Grid representation of a time-t law with monotone-cubic accessors."""
    mesh: np.ndarray
    density: np.ndarray
    cdf: np.ndarray
    time_label: float
    interpolation: str = "pchip"
    renormalized: bool = False

    @classmethod
    def from_density(cls, mesh: np.ndarray, density: np.ndarray, t: float) -> "MarginalLaw":
        mesh = np.asarray(mesh, dtype=float)
        p = np.clip(np.asarray(density, dtype=float), 0.0, None)
        mass = trapezoid(p, mesh)
        if not mass > 0 or not np.isfinite(mass):
            raise ValueError(f"law at t={t:g} has no mass")
        renormalized = abs(mass - 1.0) > MASS_TOL
        if renormalized:
            logger.warning("Renormalizing law at t=%.6g (mass %.12f)", t, mass)
        p = p / mass
        cum = CubicSpline(mesh, p).antiderivative()(mesh)
        cum = np.maximum.accumulate(cum)
        cum = np.clip(cum / cum[-1], 0.0, 1.0)
        return cls(mesh=mesh, density=p, cdf=cum, time_label=float(t),
                   renormalized=renormalized)

    @classmethod
    def from_pdf(cls, mesh: np.ndarray, pdf: Callable[[np.ndarray], np.ndarray],
                 t: float) -> "MarginalLaw":
        mesh = np.asarray(mesh, dtype=float)
        return cls.from_density(mesh, pdf(mesh), t)

    def mass(self) -> float:
        return float(trapezoid(self.density, self.mesh))

    def mean(self) -> float:
        return float(trapezoid(self.mesh * self.density, self.mesh))

    def variance(self) -> float:
        mu = self.mean()
        return float(trapezoid((self.mesh - mu) ** 2 * self.density, self.mesh))

    @cached_property
    def _cdf_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.mesh, self.cdf, self.density)

    @cached_property
    def _density_spline(self) -> CubicSpline:
        return CubicSpline(self.mesh, self.density, extrapolate=False)

    @cached_property
    def _inverse(self) -> PchipInterpolator:
        levels, first = np.unique(self.cdf, return_index=True)
        return PchipInterpolator(levels, self.mesh[first])

    def cdf_at(self, x):
        x = np.asarray(x, dtype=float)
        out = np.clip(self._cdf_spline(x), 0.0, 1.0)
        out = np.where(x <= self.mesh[0], 0.0, out)
        return np.where(x >= self.mesh[-1], 1.0, out)

    def density_at(self, x):
        out = self._density_spline(np.asarray(x, dtype=float))
        return np.nan_to_num(np.clip(out, 0.0, None), nan=0.0)

    def quantile(self, u):
        """Monotone-cubic inverse CDF, polished by Newton steps on the cubic CDF."""
        u = np.asarray(u, dtype=float)
        if np.any(~(u > 0.0)) or np.any(~(u < 1.0)):
            raise ValueError("quantile level must lie in the open interval (0, 1)")
        x = np.asarray(self._inverse(u), dtype=float)
        h = float(self.mesh[1] - self.mesh[0])
        floor = 1e-10 * float(self.density.max())
        for _ in range(NEWTON_POLISH):
            p = self.density_at(x)
            ok = p > floor
            step = np.where(ok, (self._cdf_spline(x) - u) / np.where(ok, p, 1.0), 0.0)
            x = x - np.clip(step, -h, h)
        return np.clip(x, self.mesh[0], self.mesh[-1])

    def dump_csv(self, path: str | Path):
        data = np.column_stack([self.mesh, self.density, self.cdf])
        np.savetxt(path, data, delimiter=",", header="x,density,cdf", comments="",
                   fmt="%.17g")


def gaussian_pdf(mean: float, var: float) -> Callable[[np.ndarray], np.ndarray]:
    def pdf(x):
        return np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)
    return pdf


@dataclass
class LawSequence:
    """Laws at increasing output times plus the worst mass drift seen while evolving."""
    times: np.ndarray
    laws: list[MarginalLaw]
    max_mass_drift: float = 0.0

    def at(self, t: float, tol: float = 1e-12) -> MarginalLaw:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"no law stored at t={t:g}")
        return self.laws[i]

    def __len__(self) -> int:
        return len(self.laws)

    def dump(self, directory: str | Path, prefix: str):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for t, law in zip(self.times, self.laws):
            law.dump_csv(directory / f"{prefix}_t{t:.6f}.csv")
