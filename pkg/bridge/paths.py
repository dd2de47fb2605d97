import logging

import numpy as np

from bridge.score import BridgeScore
from model.diffusion import DiffusionModel
from simulate.euler import GridSpec, PathBundle

logger = logging.getLogger(__name__)


def _rows(value, rows: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (rows,)).copy()


def _evaluator(model: DiffusionModel, score: BridgeScore | None) -> BridgeScore:
    return score if score is not None else BridgeScore(model)


def bridge_path(model: DiffusionModel, x, y, interval: tuple[float, float],
                increments, score: BridgeScore | None = None) -> PathBundle:
    """Euler integration of the bridge SDE from x at s to y at s′.

    dZ = [b(Z) + a(Z)·∂_x log p_{s′−t}(Z, y)]dt + σ(Z)dB on the fine steps of
    ``increments``; the last step is the exact pin, so the stored value at
    s′ is y and the last increment is not used.
    """
    s, s_end = interval
    length = s_end - s
    if not length > 0:
        raise ValueError(f"bridge interval must have positive length, got {interval}")
    inc = np.asarray(increments, dtype=float)
    inc = inc[None, :] if inc.ndim == 1 else inc
    rows, n = inc.shape
    evaluate = _evaluator(model, score)
    dt = length / n
    z = _rows(x, rows)
    target = _rows(y, rows)
    values = np.empty((rows, n + 1))
    values[:, 0] = z
    for k in range(n - 1):
        remaining = length - k * dt
        drift = model.b(z) + model.a(z) * evaluate(remaining, z, target)
        z = z + drift * dt + model.s(z) * inc[:, k]
        values[:, k + 1] = z
    values[:, n] = target
    return PathBundle(grid=GridSpec(T=length, N=n), values=values, increments=inc,
                      label="bridge", offset=s,
                      exit_steps=np.full(rows, -1, dtype=np.int64))


def extract_bridge_bm(model: DiffusionModel, path: PathBundle, rng: np.random.Generator,
                      endpoint=None, score: BridgeScore | None = None) -> np.ndarray:
    """Increments of W^l = W − ∫σ(X)·∂_x log p_{s_{l+1}−s}(X, X_{s_{l+1}}) ds over one interval.

    ``path`` holds the interval's values and driving increments; ``endpoint``
    defaults to its last value. On the final fine step the score integral
    removes the whole conditional mean of the step and leaves a bridge
    fluctuation that is N(0, Δ) and independent of the path, so that
    increment is drawn from ``rng``, which callers key by seed, block and
    interval.
    """
    values = np.atleast_2d(path.values)
    inc = np.atleast_2d(path.increments)
    rows, n = inc.shape
    if values.shape[1] != n + 1:
        raise ValueError("path values and increments do not match")
    evaluate = _evaluator(model, score)
    length = path.grid.T
    dt = length / n
    target = values[:, -1] if endpoint is None else _rows(endpoint, rows)
    out = np.empty_like(inc)
    for k in range(n - 1):
        x = values[:, k]
        out[:, k] = inc[:, k] - model.s(x) * evaluate(length - k * dt, x, target) * dt
    out[:, n - 1] = rng.standard_normal(rows) * np.sqrt(dt)
    return out


def bridge_lipschitz(model: DiffusionModel, x: float, y: float, interval: tuple[float, float],
                     increments, eps: float, score: BridgeScore | None = None) -> float:
    """Empirical endpoint-Lipschitz constant sup_t|Z^{x,y} − Z^{x+ε,y+ε}|/ε under shared noise."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    evaluate = _evaluator(model, score)
    base = bridge_path(model, x, y, interval, increments, evaluate)
    moved = bridge_path(model, x + eps, y + eps, interval, increments, evaluate)
    gaps = np.abs(base.values - moved.values).max(axis=1)
    return float(gaps.max() / eps)
