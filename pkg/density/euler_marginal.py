import logging
import math

import numpy as np
from scipy import sparse

from density.law import LawSequence, MarginalLaw, MeshSpec, gaussian_pdf, trapezoid_weights
from errors import DensityError
from model.diffusion import DiffusionModel
from simulate.euler import GridSpec

logger = logging.getLogger(__name__)

KERNEL_CUTOFF = 9.0
MIN_KERNEL_CELLS = 2.0
COLUMN_CHUNK = 256


def euler_kernel(model: DiffusionModel, x: np.ndarray, dt: float,
                 cutoff: float = KERNEL_CUTOFF) -> sparse.csr_matrix:
    """One Euler step y → N(y + b(y)dt, a(y)dt) as a sparse quadrature matrix.

    Columns are normalized so that Σ_i w_i K[i, j] = w_j for the trapezoid
    weights w; applying K therefore conserves trapezoidal mass exactly.
    """
    n = x.size
    h = float(x[1] - x[0])
    mean = x + model.b(x) * dt
    sd = np.sqrt(model.a(x) * dt)
    if not float(sd.min()) >= MIN_KERNEL_CELLS * h:
        raise DensityError(
            f"Euler kernel under-resolved: step std {float(sd.min()):.3e} is below "
            f"{MIN_KERNEL_CELLS:g} mesh cells of {h:.3e}")
    w = trapezoid_weights(x)
    shift = (mean - x) / h
    reach = math.ceil(cutoff * float(sd.max()) / h) + 1
    offsets = np.arange(math.floor(shift.min()) - reach, math.ceil(shift.max()) + reach + 1)

    rows_out, cols_out, data_out = [], [], []
    for first in range(0, n, COLUMN_CHUNK):
        cols = np.arange(first, min(first + COLUMN_CHUNK, n))
        rows = cols[:, None] + offsets[None, :]
        valid = (rows >= 0) & (rows < n)
        safe = np.clip(rows, 0, n - 1)
        z = (x[safe] - mean[cols, None]) / sd[cols, None]
        valid &= np.abs(z) <= cutoff
        g = np.where(valid, np.exp(-0.5 * z * z), 0.0)
        norm = (g * w[safe]).sum(axis=1)
        vals = g * (w[cols] / norm)[:, None]
        rows_out.append(rows[valid])
        cols_out.append(np.broadcast_to(cols[:, None], rows.shape)[valid])
        data_out.append(vals[valid])
    return sparse.csr_matrix(
        (np.concatenate(data_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n, n))


def first_step_density(model: DiffusionModel, x: np.ndarray, dt: float, x0: float) -> np.ndarray:
    """Exact law after one Euler step from a point mass."""
    var = float(model.a(x0)) * dt
    if math.sqrt(var) < MIN_KERNEL_CELLS * float(x[1] - x[0]):
        raise DensityError(f"first Euler step from {x0:g} is under-resolved on the mesh")
    return gaussian_pdf(x0 + float(model.b(x0)) * dt, var)(x)


def partial_step(model: DiffusionModel, law: MarginalLaw, dt: float) -> MarginalLaw:
    """Law at time_label + dt of the continuous Euler interpolation started from ``law``."""
    kernel = euler_kernel(model, law.mesh, dt)
    return MarginalLaw.from_density(law.mesh, kernel @ law.density, law.time_label + dt)


def euler_marginal_evolve(model: DiffusionModel, grid: GridSpec, mesh: MeshSpec,
                          midpoints: bool = False, x0: float | None = None) -> LawSequence:
    """Laws of the Euler scheme at t_1, …, t_N by the Gaussian-mixture recursion.

    With ``midpoints`` the sequence also holds the intra-step laws at
    t_k + Δ/2, each obtained by one partial kernel step from t_k.
    """
    start = model.x0 if x0 is None else float(x0)
    x = mesh.points()
    w = trapezoid_weights(x)
    dt = grid.dt
    p = first_step_density(model, x, dt, start)
    mass0 = float(w @ p)
    kernel = euler_kernel(model, x, dt) if grid.N > 1 else None
    half = euler_kernel(model, x, 0.5 * dt) if midpoints and grid.N > 1 else None

    times, laws = [], []
    if midpoints:
        times.append(0.5 * dt)
        laws.append(MarginalLaw.from_density(x, first_step_density(model, x, 0.5 * dt, start),
                                             0.5 * dt))
    drift = 0.0
    for k in range(1, grid.N + 1):
        t = k * dt
        if k > 1:
            p = kernel @ p
            drift = max(drift, abs(float(w @ p) - mass0))
        times.append(t)
        laws.append(MarginalLaw.from_density(x, p, t))
        if midpoints and k < grid.N:
            times.append(t + 0.5 * dt)
            laws.append(MarginalLaw.from_density(x, half @ p, t + 0.5 * dt))

    logger.debug("Euler marginals for %s at N=%d: mass drift %.3e",
                 model.describe(), grid.N, drift)
    return LawSequence(times=np.asarray(times), laws=laws, max_mass_drift=drift)
