import logging
import math
from dataclasses import dataclass

import numpy as np

from density.law import LawSequence
from model.diffusion import DiffusionModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualReport:
    """Finite-difference residual of the quantile-flow equation on a (t, u) grid."""
    max_residual: float
    l2_residual: float
    slices: int
    u_range: tuple[float, float]
    u_step: float
    worst_time: float
    worst_level: float


def inverse_cdf_pde_residual(laws: LawSequence, model: DiffusionModel,
                             u_range: tuple[float, float] = (0.05, 0.95),
                             u_step: float = 1.0e-3,
                             t_min: float = 0.0) -> ResidualReport:
    """Residual of ∂_t Q = −½∂_u(a(Q)/∂_u Q) + b(Q) for the quantile flow Q of ``laws``.

    Uses a(Q)/∂_u Q = a(Q)·p(Q), differenced once in u across half-steps;
    ∂_t Q is a central difference between neighbouring slices. Only slices
    with both neighbours and time ≥ ``t_min`` are scored.
    """
    times = np.asarray(laws.times, dtype=float)
    if times.size < 3:
        raise ValueError(f"residual needs at least 3 time slices, got {times.size}")
    lo, hi = u_range
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"u range must lie inside (0, 1), got {u_range}")
    u = np.arange(lo, hi + 0.5 * u_step, u_step)
    half = 0.5 * u_step

    def flux(law, levels):
        q = law.quantile(levels)
        return model.a(q) * law.density_at(q)

    interior = [i for i in range(1, times.size - 1) if times[i] >= t_min]
    if not interior:
        raise ValueError("no interior time slice at or after t_min")

    worst = (0.0, math.nan, math.nan)
    squares = []
    for i in interior:
        law = laws.laws[i]
        q = law.quantile(u)
        dq_dt = (laws.laws[i + 1].quantile(u) - laws.laws[i - 1].quantile(u)) / (
            times[i + 1] - times[i - 1])
        dflux = (flux(law, u + half) - flux(law, u - half)) / u_step
        r = np.abs(dq_dt + 0.5 * dflux - model.b(q))
        j = int(np.argmax(r))
        if r[j] > worst[0]:
            worst = (float(r[j]), float(times[i]), float(u[j]))
        squares.append(r * r)
    l2 = math.sqrt(float(np.mean(np.concatenate(squares))))
    logger.debug("Quantile-flow residual for %s: max %.3e at t=%.4g, u=%.4g",
                 model.describe(), worst[0], worst[1], worst[2])
    return ResidualReport(max_residual=worst[0], l2_residual=l2, slices=len(interior),
                          u_range=(lo, hi), u_step=u_step,
                          worst_time=worst[1], worst_level=worst[2])
