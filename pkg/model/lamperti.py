import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from errors import ModelError
from model.diffusion import DiffusionModel

logger = logging.getLogger(__name__)

QUAD_TOL = 1.0e-13
NEWTON_STEPS = 6


class AlphaBundle(NamedTuple):
    """Transformed drift α and its first two derivatives, in Lamperti coordinates."""
    alpha: Callable[[np.ndarray], np.ndarray]
    alpha1: Callable[[np.ndarray], np.ndarray]
    alpha2: Callable[[np.ndarray], np.ndarray]


def _inverse_sigma_integral(model: DiffusionModel, lo: float, hi: float) -> float:
    value, err = quad(lambda y: 1.0 / float(model.s(y)), lo, hi,
                      epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    if not np.isfinite(value) or err > 1e-8 * max(1.0, abs(value)):
        raise ModelError(f"quadrature of 1/sigma did not converge on [{lo:g}, {hi:g}]")
    return value


@dataclass(frozen=True)
class LampertiModel:
    """φ(x) = ∫_anchor^x dy/σ(y) tabulated on a fine grid, with exact slopes 1/σ.

    φ is a cubic Hermite interpolant of adaptive-quadrature node values;
    beyond the table it falls back to direct quadrature.
    """
    model: DiffusionModel
    anchor: float
    nodes: np.ndarray
    values: np.ndarray
    spline: CubicHermiteSpline = field(repr=False)
    numeric_derivatives: bool = False

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        out = np.asarray(self.spline(flat), dtype=float)
        lo, hi = self.nodes[0], self.nodes[-1]
        for i in np.flatnonzero((flat < lo) | (flat > hi)):
            if not self.model.in_domain(flat[i]):
                raise ModelError(f"phi evaluated outside the model domain at {flat[i]:g}")
            if flat[i] < lo:
                out[i] = self.values[0] - _inverse_sigma_integral(self.model, flat[i], lo)
            else:
                out[i] = self.values[-1] + _inverse_sigma_integral(self.model, hi, flat[i])
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def phi_inverse(self, y):
        """Safeguarded Newton iteration inside the bracketing table cell."""
        y = np.asarray(y, dtype=float)
        flat = np.atleast_1d(y).ravel()
        x = np.interp(flat, self.values, self.nodes)
        inside = (flat >= self.values[0]) & (flat <= self.values[-1])
        idx = np.clip(np.searchsorted(self.values, flat) - 1, 0, self.nodes.size - 2)
        left, right = self.nodes[idx], self.nodes[idx + 1]
        for _ in range(NEWTON_STEPS):
            step = (self.spline(x) - flat) * self.model.s(x)
            x = np.where(inside, np.clip(x - step, left, right), x)
        for i in np.flatnonzero(~inside):
            x[i] = self._outer_root(flat[i])
        return x.reshape(y.shape) if y.ndim else float(x[0])

    def _outer_root(self, target: float) -> float:
        """Bracket-and-bisect for targets beyond the tabulated range."""
        below = target < self.values[0]
        edge = self.nodes[0] if below else self.nodes[-1]
        span = self.nodes[-1] - self.nodes[0]
        lo_dom, hi_dom = self.model.domain
        far = edge
        for _ in range(64):
            if self.model.log_scale and below:
                far = 0.5 * far
            else:
                far = far - span if below else far + span
                span *= 2.0
            far = min(max(far, np.nextafter(lo_dom, np.inf)), np.nextafter(hi_dom, -np.inf))
            gap = self.phi(far) - target
            if (below and gap <= 0.0) or (not below and gap >= 0.0):
                break
        else:
            raise ModelError(f"phi_inverse could not bracket {target:g}")
        a, b = (far, edge) if below else (edge, far)
        return brentq(lambda s: self.phi(s) - target, a, b, xtol=1e-14, rtol=4e-16)

    def _h(self, x):
        m = self.model
        return m.b(x) / m.s(x) - 0.5 * m.derivatives["sigma1"](x)

    def _h_derivatives(self, x):
        m = self.model
        if self.numeric_derivatives:
            eps = 1.0e-4
            h_plus, h0, h_minus = self._h(x + eps), self._h(x), self._h(x - eps)
            return (h_plus - h_minus) / (2 * eps), (h_plus - 2 * h0 + h_minus) / eps ** 2
        d = m.derivatives
        b, s = m.b(x), m.s(x)
        b1, b2 = d["b1"](x), d["b2"](x)
        s1, s2, s3 = d["sigma1"](x), d["sigma2"](x), d["sigma3"](x)
        h1 = b1 / s - b * s1 / s ** 2 - 0.5 * s2
        h2 = (b2 / s - 2.0 * b1 * s1 / s ** 2 - b * s2 / s ** 2
              + 2.0 * b * s1 ** 2 / s ** 3 - 0.5 * s3)
        return h1, h2

    def alpha(self, y):
        return self._h(self.phi_inverse(y))

    def alpha1(self, y):
        x = self.phi_inverse(y)
        h1, _ = self._h_derivatives(x)
        return self.model.s(x) * h1

    def alpha2(self, y):
        x = self.phi_inverse(y)
        h1, h2 = self._h_derivatives(x)
        s = self.model.s(x)
        s1 = self.model.derivatives["sigma1"](x)
        return s * (s1 * h1 + s * h2)

    def alpha_bundle(self) -> AlphaBundle:
        return AlphaBundle(self.alpha, self.alpha1, self.alpha2)


def lamperti(model: DiffusionModel, horizon: float = 1.0, width: float = 12.0,
             table_points: int = 4097) -> LampertiModel:
    """Lamperti reduction of ``model`` to unit diffusion coefficient."""
    if not model.has_derivative("sigma1"):
        raise ModelError(f"lamperti unavailable for {model.describe()}: sigma' not declared")
    numeric = not all(model.has_derivative(k) for k in ("b1", "b2", "sigma2", "sigma3"))
    if numeric:
        logger.warning("Lamperti alpha derivatives of %s use finite differences",
                       model.describe())

    lo, hi = model.support(horizon, width)
    anchor = model.lamperti_anchor
    if model.log_scale:
        nodes = np.geomspace(lo, hi, table_points)
    else:
        nodes = np.linspace(lo, hi, table_points)
    anchored = lo < anchor < hi
    if anchored:
        # snap the nearest node onto the anchor so that phi(anchor) = 0 exactly
        nodes[int(np.argmin(np.abs(nodes - anchor)))] = anchor

    s = model.s(nodes)
    if np.any(~(s > 0.0)):
        bad = nodes[np.flatnonzero(~(s > 0.0))[0]]
        raise ModelError(f"sigma <= 0 encountered at x={bad:g}")

    pieces = np.array([_inverse_sigma_integral(model, nodes[i], nodes[i + 1])
                       for i in range(nodes.size - 1)])
    if anchored:
        k = int(np.flatnonzero(nodes == anchor)[0])
        values = np.empty_like(nodes)
        values[k] = 0.0
        values[k + 1:] = np.cumsum(pieces[k:])
        values[:k] = -np.cumsum(pieces[:k][::-1])[::-1]
    else:
        start = _inverse_sigma_integral(model, anchor, nodes[0])
        values = start + np.concatenate([[0.0], np.cumsum(pieces)])

    spline = CubicHermiteSpline(nodes, values, 1.0 / s, extrapolate=True)
    logger.debug("Lamperti table for %s on [%.4g, %.4g] with %d nodes",
                 model.describe(), lo, hi, nodes.size)
    return LampertiModel(model=model, anchor=anchor, nodes=nodes, values=values,
                         spline=spline, numeric_derivatives=numeric)
