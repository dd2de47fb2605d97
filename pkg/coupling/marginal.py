import logging
from dataclasses import dataclass

import numpy as np

from density.conditional import ConditionalLaws
from model.diffusion import DiffusionModel
from simulate.euler import GridSpec, PathBundle

logger = logging.getLogger(__name__)

CLIP_WARN_FRACTION = 1.0e-4


@dataclass
class CoarseCoupling:
    values: np.ndarray
    clipped: int = 0
    steps: int = 0


def coarse_marginal_coupling(model: DiffusionModel, grid: GridSpec, X: PathBundle,
                             laws: ConditionalLaws | None) -> CoarseCoupling:
    """Markovian conditional quantile coupling of the Euler chain to X on the coarse grid.

    u_l = F^X(X_{s_{l+1}} | X_{s_l}) and Ȳ_{s_{l+1}} = (F^Euler)⁻¹(u_l | Ȳ_{s_l}),
    starting from Ȳ_{s_0} = X_{s_0}. Constant-coefficient models use the
    identity map, since both conditional laws coincide.
    """
    xs = X.grid_values()[:, grid.coarse_indices]
    if model.constant_coefficients:
        return CoarseCoupling(values=xs.copy(), steps=grid.n * xs.shape[0])
    if laws is None:
        raise ValueError("conditional laws are required for non-constant coefficients")
    ys = np.empty_like(xs)
    ys[:, 0] = xs[:, 0]
    clipped = 0
    for l in range(grid.n):
        live = np.isfinite(xs[:, l + 1]) & np.isfinite(ys[:, l])
        ys[:, l + 1] = np.nan
        if live.any():
            image, count = laws.couple(grid.interval_steps(l), xs[live, l], xs[live, l + 1],
                                       ys[live, l])
            ys[live, l + 1] = image
            clipped += count
    total = grid.n * xs.shape[0]
    if clipped > CLIP_WARN_FRACTION * total:
        logger.warning("Clipped %d of %d coupling levels away from {0, 1}", clipped, total)
    return CoarseCoupling(values=ys, clipped=clipped, steps=total)
