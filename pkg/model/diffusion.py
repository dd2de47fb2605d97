import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtr, ndtri

from errors import ModelError

logger = logging.getLogger(__name__)

Coefficient = Callable[[np.ndarray], np.ndarray]

DERIVATIVE_KEYS = (
    "b1", "b2", "b3",
    "sigma1", "sigma2", "sigma3",
    "a1", "a2", "a3", "a4",
)

# parent function and order for each derivative key
DERIVATIVE_PARENTS = {
    "b1": ("b", 1), "b2": ("b", 2), "b3": ("b", 3),
    "sigma1": ("sigma", 1), "sigma2": ("sigma", 2), "sigma3": ("sigma", 3),
    "a1": ("a", 1), "a2": ("a", 2), "a3": ("a", 3), "a4": ("a", 4),
}


@dataclass(frozen=True)
class ExactLaw:
    """Closed-form transition law, Gaussian after a monotone transform.

    ``mean`` and ``variance`` describe the transformed value
    ``transform(X_t)`` given ``X_0 = x``. ``score`` is the x-gradient of the
    log transition density in the original coordinates.
    """
    mean: Callable[[float, np.ndarray], np.ndarray]
    variance: Callable[[float, np.ndarray], np.ndarray]
    score: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    log_scale: bool = False

    def _forward(self, y):
        return np.log(y) if self.log_scale else np.asarray(y, dtype=float)

    def _backward(self, z):
        return np.exp(z) if self.log_scale else z

    def cdf(self, t: float, x, y):
        z = (self._forward(y) - self.mean(t, x)) / np.sqrt(self.variance(t, x))
        return ndtr(z)

    def ppf(self, t: float, x, u):
        z = self.mean(t, x) + np.sqrt(self.variance(t, x)) * ndtri(u)
        return self._backward(z)

    def density(self, t: float, x, y):
        y = np.asarray(y, dtype=float)
        var = self.variance(t, x)
        z = self._forward(y) - self.mean(t, x)
        p = np.exp(-0.5 * z * z / var) / np.sqrt(2.0 * math.pi * var)
        return p / y if self.log_scale else p

    def step(self, x, dt: float, dw):
        """Exact transition over ``dt`` driven by the Gaussian increment ``dw``."""
        noise = np.asarray(dw) / math.sqrt(dt)
        z = self.mean(dt, x) + np.sqrt(self.variance(dt, x)) * noise
        return self._backward(z)


@dataclass(frozen=True)
class DiffusionModel:
    """Coefficients of dX = b(X)dt + σ(X)dW on an open interval."""
    name: str
    drift: Coefficient
    sigma: Coefficient
    x0: float
    domain: tuple[float, float] = (-math.inf, math.inf)
    ellipticity_floor: float = 0.0
    derivatives: Mapping[str, Coefficient] = field(default_factory=dict)
    exact_law: ExactLaw | None = None
    lamperti_anchor: float = 0.0
    constant_coefficients: bool = False
    log_scale: bool = False
    params: Mapping[str, float] = field(default_factory=dict)

    def b(self, x):
        return self.drift(np.asarray(x, dtype=float))

    def s(self, x):
        return self.sigma(np.asarray(x, dtype=float))

    def a(self, x):
        s = self.s(x)
        return s * s

    def derivative(self, key: str) -> Coefficient | None:
        if key not in DERIVATIVE_PARENTS:
            raise KeyError(f"unknown derivative key {key!r}")
        return self.derivatives.get(key)

    def has_derivative(self, key: str) -> bool:
        return key in self.derivatives

    def in_domain(self, x) -> np.ndarray:
        lo, hi = self.domain
        x = np.asarray(x, dtype=float)
        return (x > lo) & (x < hi) & np.isfinite(x)

    def support(self, horizon: float, width: float = 8.0) -> tuple[float, float]:
        """Interval carrying the law of X on [0, horizon] up to ``width`` deviations."""
        scale = float(self.s(self.x0)) * math.sqrt(horizon)
        if self.log_scale:
            rel = scale / self.x0
            return self.x0 * math.exp(-width * rel), self.x0 * math.exp(width * rel)
        lo, hi = self.x0 - width * scale, self.x0 + width * scale
        return max(lo, self.domain[0]), min(hi, self.domain[1])

    @property
    def has_closed_form_score(self) -> bool:
        return self.exact_law is not None

    def describe(self) -> str:
        args = ", ".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.name}({args})" if args else self.name


def sigma_derivatives_from_a(a: Coefficient, a1: Coefficient, a2: Coefficient,
                             a3: Coefficient) -> dict[str, Coefficient]:
    """σ = √a and its first three derivatives expressed through a."""
    def sigma(x):
        return np.sqrt(a(x))

    def sigma1(x):
        return a1(x) / (2.0 * sigma(x))

    def sigma2(x):
        s = sigma(x)
        return a2(x) / (2.0 * s) - a1(x) ** 2 / (4.0 * s ** 3)

    def sigma3(x):
        s = sigma(x)
        d1, d2 = a1(x), a2(x)
        return (a3(x) / (2.0 * s) - 3.0 * d1 * d2 / (4.0 * s ** 3)
                + 3.0 * d1 ** 3 / (8.0 * s ** 5))

    return {"sigma": sigma, "sigma1": sigma1, "sigma2": sigma2, "sigma3": sigma3}


def _const(value: float) -> Coefficient:
    def f(x):
        return np.full(np.shape(x), value, dtype=float)
    return f


def _zero(x):
    return np.zeros(np.shape(x), dtype=float)


def _positive(params: Mapping[str, float], key: str, default: float) -> float:
    value = float(params.get(key, default))
    if not value > 0.0:
        raise ModelError(f"parameter {key} must be positive, got {value}")
    return value


def _bm_drift(params: Mapping[str, float]) -> DiffusionModel:
    b = float(params.get("b", 0.0))
    sig = _positive(params, "sigma", 1.0)
    x0 = float(params.get("x0", 0.0))
    a = sig * sig

    def score(t, x, y):
        return (np.asarray(y) - np.asarray(x) - b * t) / (a * t)

    law = ExactLaw(
        mean=lambda t, x: np.asarray(x, dtype=float) + b * t,
        variance=lambda t, x: np.full(np.shape(x), a * t, dtype=float),
        score=score,
    )
    derivatives = {
        "b1": _zero, "b2": _zero, "b3": _zero,
        "sigma1": _zero, "sigma2": _zero, "sigma3": _zero,
        "a1": _zero, "a2": _zero, "a3": _zero, "a4": _zero,
    }
    return DiffusionModel(
        name="bm_drift", drift=_const(b), sigma=_const(sig), x0=x0,
        ellipticity_floor=a, derivatives=derivatives, exact_law=law,
        lamperti_anchor=0.0, constant_coefficients=True,
        params={"b": b, "sigma": sig, "x0": x0},
    )


def _ou(params: Mapping[str, float]) -> DiffusionModel:
    kappa = _positive(params, "kappa", 1.0)
    sig = _positive(params, "sigma", 1.0)
    x0 = float(params.get("x0", 0.0))
    a = sig * sig

    def variance(t, x):
        v = -a * math.expm1(-2.0 * kappa * t) / (2.0 * kappa)
        return np.full(np.shape(x), v, dtype=float)

    def mean(t, x):
        return np.asarray(x, dtype=float) * math.exp(-kappa * t)

    def score(t, x, y):
        decay = math.exp(-kappa * t)
        v = -a * math.expm1(-2.0 * kappa * t) / (2.0 * kappa)
        return decay * (np.asarray(y) - np.asarray(x) * decay) / v

    derivatives = {
        "b1": _const(-kappa), "b2": _zero, "b3": _zero,
        "sigma1": _zero, "sigma2": _zero, "sigma3": _zero,
        "a1": _zero, "a2": _zero, "a3": _zero, "a4": _zero,
    }
    return DiffusionModel(
        name="ou", drift=lambda x: -kappa * np.asarray(x, dtype=float),
        sigma=_const(sig), x0=x0, ellipticity_floor=a,
        derivatives=derivatives,
        exact_law=ExactLaw(mean=mean, variance=variance, score=score),
        lamperti_anchor=0.0,
        params={"kappa": kappa, "sigma": sig, "x0": x0},
    )


def _gbm(params: Mapping[str, float]) -> DiffusionModel:
    mu = float(params.get("mu", 0.05))
    sig = _positive(params, "sigma", 0.3)
    x0 = _positive(params, "x0", 1.0)
    nu = mu - 0.5 * sig * sig

    def score(t, x, y):
        x = np.asarray(x, dtype=float)
        return (np.log(np.asarray(y) / x) - nu * t) / (sig * sig * t * x)

    law = ExactLaw(
        mean=lambda t, x: np.log(np.asarray(x, dtype=float)) + nu * t,
        variance=lambda t, x: np.full(np.shape(x), sig * sig * t, dtype=float),
        score=score,
        log_scale=True,
    )
    derivatives = {
        "b1": _const(mu), "b2": _zero, "b3": _zero,
        "sigma1": _const(sig), "sigma2": _zero, "sigma3": _zero,
        "a1": lambda x: 2.0 * sig * sig * np.asarray(x, dtype=float),
        "a2": _const(2.0 * sig * sig), "a3": _zero, "a4": _zero,
    }
    return DiffusionModel(
        name="gbm", drift=lambda x: mu * np.asarray(x, dtype=float),
        sigma=lambda x: sig * np.asarray(x, dtype=float), x0=x0,
        domain=(0.0, math.inf), ellipticity_floor=0.0,
        derivatives=derivatives, exact_law=law, lamperti_anchor=1.0,
        log_scale=True,
        params={"mu": mu, "sigma": sig, "x0": x0},
    )


def _sin_elliptic(params: Mapping[str, float]) -> DiffusionModel:
    x0 = float(params.get("x0", 0.0))

    def a(x):
        return 1.0 + 0.5 * np.sin(x)

    def a1(x):
        return 0.5 * np.cos(x)

    def a2(x):
        return -0.5 * np.sin(x)

    def a3(x):
        return -0.5 * np.cos(x)

    def a4(x):
        return 0.5 * np.sin(x)

    sig = sigma_derivatives_from_a(a, a1, a2, a3)
    derivatives = {
        "b1": lambda x: -0.3 * np.sin(x),
        "b2": lambda x: -0.3 * np.cos(x),
        "b3": lambda x: 0.3 * np.sin(x),
        "sigma1": sig["sigma1"], "sigma2": sig["sigma2"], "sigma3": sig["sigma3"],
        "a1": a1, "a2": a2, "a3": a3, "a4": a4,
    }
    return DiffusionModel(
        name="sin_elliptic",
        drift=lambda x: 0.3 * np.cos(np.asarray(x, dtype=float)),
        sigma=lambda x: sig["sigma"](np.asarray(x, dtype=float)),
        x0=x0, ellipticity_floor=0.5, derivatives=derivatives,
        lamperti_anchor=0.0, params={"x0": x0},
    )


BUILTINS: dict[str, Callable[[Mapping[str, float]], DiffusionModel]] = {
    "bm_drift": _bm_drift,
    "ou": _ou,
    "gbm": _gbm,
    "sin_elliptic": _sin_elliptic,
}

# builtins admitted for oracle experiments although their drift or
# diffusion coefficient is unbounded
UNBOUNDED_BUILTINS = frozenset({"ou", "gbm"})


def builtin(name: str, params: Mapping[str, float] | None = None) -> DiffusionModel:
    """Instantiate a builtin model by name."""
    factory = BUILTINS.get(name)
    if factory is None:
        raise ModelError(
            f"unknown model {name!r}; expected one of {', '.join(sorted(BUILTINS))}"
        )
    model = factory(dict(params or {}))
    if name in UNBOUNDED_BUILTINS:
        logger.warning(
            "Model %s has unbounded coefficients; admitted for its exact law",
            model.describe(),
        )
    return model
