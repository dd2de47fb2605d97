"""Transition scores ∂_x log p_t(x, y) for the bridge drift.

Models with an exact law use its closed form. Otherwise the score is
computed in Lamperti coordinates as (ŷ − x̂)/t − α(x̂) + g_t(x̂, ŷ) and mapped
back with the chain factor 1/σ(x). The correction g_t is a ratio of
Brownian-bridge expectations, estimated by Monte Carlo on a cached lattice,
or by its deterministic first-order expansion along the straight line.
"""

import logging
import math
import threading
from typing import Literal

import numpy as np

from errors import ModelError, ScoreError
from model.diffusion import DiffusionModel
from model.lamperti import AlphaBundle, lamperti
from simulate.brownian import Stream, block_generator

logger = logging.getLogger(__name__)

ScoreMode = Literal["auto", "closed_form", "lamperti_mc", "lamperti_expansion"]

MIN_INNER_STEPS = 32
DENOMINATOR_SIGMAS = 5.0
EXPANSION_ORDER = 16


def _bridge_samples(t: float, x_hat: float, y_hat: float, mg: int, steps: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Brownian bridges from x̂ at 0 to ŷ at t: shape (mg, steps + 1)."""
    s = np.linspace(0.0, t, steps + 1)
    w = np.zeros((mg, steps + 1))
    w[:, 1:] = np.cumsum(rng.standard_normal((mg, steps)) * math.sqrt(t / steps), axis=1)
    ratio = s / t
    return x_hat + ratio * (y_hat - x_hat) + w - ratio * w[:, -1:]


def g_estimate(alpha: AlphaBundle, t: float, x_hat: float, y_hat: float,
               mg: int = 4096, seed: int = 0, steps: int | None = None,
               h_g: float = 1.0 / 64,
               rng: np.random.Generator | None = None) -> tuple[float, float]:
    """−½·E[e^{−½∫(α′+α²)}·∫((t−s)/t)(α″+2αα′)] / E[e^{−½∫(α′+α²)}] over bridges x̂ → ŷ.

    Integrals use the trapezoid rule on max(32, ⌈t/h_g⌉) steps; the standard
    error comes from the delta method for a ratio of means.
    """
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if mg < 2:
        raise ValueError("mg must be at least 2")
    n = steps if steps is not None else max(MIN_INNER_STEPS, math.ceil(t / h_g))
    if rng is None:
        rng = block_generator(seed, Stream.SCORE, 0)
    paths = _bridge_samples(t, x_hat, y_hat, mg, n, rng)
    a0 = alpha.alpha(paths)
    a1 = alpha.alpha1(paths)
    potential = a1 + a0 * a0
    gradient = alpha.alpha2(paths) + 2.0 * a0 * a1
    s = np.linspace(0.0, t, n + 1)
    weight = (t - s) / t
    dt = t / n
    trap = np.full(n + 1, dt)
    trap[[0, -1]] = 0.5 * dt

    e0 = np.exp(-0.5 * (potential @ trap))
    e1 = e0 * ((gradient * weight) @ trap)
    mean0 = float(e0.mean())
    se0 = float(e0.std(ddof=1)) / math.sqrt(mg)
    if not mean0 > DENOMINATOR_SIGMAS * se0:
        raise ScoreError(
            f"g estimate denominator {mean0:.3e} within {DENOMINATOR_SIGMAS:g} standard "
            f"errors of zero; increase mg")
    if not np.any(e1):
        return 0.0, 0.0
    ratio = float(e1.mean()) / mean0
    resid = e1 - ratio * e0
    se = 0.5 * float(resid.std(ddof=1)) / (math.sqrt(mg) * mean0)
    return -0.5 * ratio, se


def g_expansion(alpha: AlphaBundle, t, x_hat, y_hat, order: int = EXPANSION_ORDER):
    """First-order expansion −½∫₀ᵗ((t−s)/t)(α″+2αα′)(x̂ + (s/t)(ŷ − x̂)) ds."""
    t, x_hat, y_hat = np.broadcast_arrays(np.asarray(t, dtype=float),
                                          np.asarray(x_hat, dtype=float),
                                          np.asarray(y_hat, dtype=float))
    nodes, weights = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (nodes + 1.0)
    line = x_hat[..., None] + r * (y_hat - x_hat)[..., None]
    a0 = alpha.alpha(line)
    integrand = (1.0 - r) * (alpha.alpha2(line) + 2.0 * a0 * alpha.alpha1(line))
    return -0.5 * t * (integrand @ (0.5 * weights))


def _key(i: int) -> int:
    return 2 * i if i >= 0 else -2 * i - 1


class BridgeScore:
    """Score evaluator for one model, shared read-only across workers.

    In ``lamperti_mc`` mode g values live on a (t, x̂, ŷ) lattice with steps
    ``cache_steps`` = (T/k, Δx̂, Δŷ) and are interpolated trilinearly; each
    lattice value is estimated once with a seed derived from its indices.
    """

    def __init__(self, model: DiffusionModel, mode: ScoreMode = "auto", mg: int = 4096,
                 horizon: float = 1.0, inner_steps: int = 64,
                 cache_steps: tuple[float, float, float] = (256.0, 0.05, 0.05),
                 seed: int = 0, cache: bool = True):
        if mode == "auto":
            mode = "closed_form" if model.has_closed_form_score else "lamperti_mc"
        if mode == "closed_form" and not model.has_closed_form_score:
            raise ModelError(f"{model.describe()} has no closed-form score")
        self.model = model
        self.mode = mode
        self.mg = int(mg)
        self.horizon = float(horizon)
        self.h_g = self.horizon / inner_steps
        self.seed = int(seed)
        self.cache = cache
        self.lattice = (self.horizon / cache_steps[0], float(cache_steps[1]), float(cache_steps[2]))
        self._g: dict[tuple[int, int, int], tuple[float, float]] = {}
        self._lock = threading.Lock()
        self.transform = None
        self.alpha: AlphaBundle | None = None
        if mode != "closed_form":
            self.transform = lamperti(model, horizon=self.horizon)
            self.alpha = self.transform.alpha_bundle()

    @property
    def cache_size(self) -> int:
        with self._lock:
            return len(self._g)

    def __call__(self, t, x, y):
        t = np.asarray(t, dtype=float)
        if np.any(~(t > 0.0)):
            raise ValueError("t_remaining must be positive")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.mode == "closed_form":
            out = self.model.exact_law.score(t, x, y)
        else:
            out = self.lamperti_score(t, x, y)[0]
        out = np.asarray(out, dtype=float)
        if not np.all(np.isfinite(out)):
            raise ScoreError(f"non-finite score for {self.model.describe()}")
        return out

    def lamperti_score(self, t, x, y):
        """Score through the Lamperti reduction, with its Monte Carlo standard error."""
        if self.alpha is None:
            raise ModelError("lamperti score requested in closed-form mode")
        tr = self.transform
        x_hat = tr.phi(x)
        y_hat = tr.phi(y)
        g, se = self.g(t, x_hat, y_hat)
        chain = self.model.s(x)
        base = (y_hat - x_hat) / t - self.alpha.alpha(x_hat)
        return (base + g) / chain, se / chain

    def g(self, t, x_hat, y_hat):
        t, x_hat, y_hat = np.broadcast_arrays(np.asarray(t, dtype=float),
                                              np.asarray(x_hat, dtype=float),
                                              np.asarray(y_hat, dtype=float))
        if self.mode == "lamperti_expansion":
            return g_expansion(self.alpha, t, x_hat, y_hat), np.zeros(t.shape)
        if not self.cache:
            pairs = [g_estimate(self.alpha, float(ti), float(xi), float(yi), self.mg,
                                self.seed, h_g=self.h_g)
                     for ti, xi, yi in zip(t.ravel(), x_hat.ravel(), y_hat.ravel())]
            values = np.array([p[0] for p in pairs]).reshape(t.shape)
            errors = np.array([p[1] for p in pairs]).reshape(t.shape)
            return values, errors
        return self._interpolate(t, x_hat, y_hat)

    def _corner(self, it: int, ix: int, iy: int) -> tuple[float, float]:
        key = (it, ix, iy)
        with self._lock:
            hit = self._g.get(key)
        if hit is not None:
            return hit
        if it == 0:
            value = (0.0, 0.0)
        else:
            dt, dx, dy = self.lattice
            rng = block_generator(self.seed, Stream.SCORE, it, _key(ix), _key(iy))
            value = g_estimate(self.alpha, it * dt, ix * dx, iy * dy, self.mg,
                               h_g=self.h_g, rng=rng)
        with self._lock:
            self._g[key] = value
        return value

    def _interpolate(self, t, x_hat, y_hat):
        dt, dx, dy = self.lattice
        pos = [t / dt, x_hat / dx, y_hat / dy]
        base = [np.floor(p).astype(np.int64) for p in pos]
        frac = [p - b for p, b in zip(pos, base)]
        values = np.zeros(t.shape)
        errors = np.zeros(t.shape)
        for corner in range(8):
            bits = [(corner >> k) & 1 for k in range(3)]
            weight = np.ones(t.shape)
            for f, bit in zip(frac, bits):
                weight = weight * (f if bit else 1.0 - f)
            idx = [b + bit for b, bit in zip(base, bits)]
            for flat in np.ndindex(t.shape):
                v, e = self._corner(int(idx[0][flat]), int(idx[1][flat]), int(idx[2][flat]))
                values[flat] += weight[flat] * v
                errors[flat] += weight[flat] * e
        return values, errors


def score(model: DiffusionModel, t_remaining, x, y, mode: ScoreMode = "auto", **options):
    """∂_x log p_t(x, y) for one model; builds a throwaway evaluator."""
    return BridgeScore(model, mode=mode, **options)(t_remaining, x, y)
