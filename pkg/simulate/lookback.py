import numpy as np

from model.diffusion import DiffusionModel


def bridge_max(x_left, x_right, sigma_left, dt: float, u):
    """Maximum of the Brownian bridge interpolating one Euler step.

    Inverts the bridge-maximum tail exp(-2(m - x_left)(m - x_right)/(σ²Δ))
    at the uniform sample ``u`` ∈ (0, 1].
    """
    if not dt > 0:
        raise ValueError(f"step length must be positive, got {dt}")
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u > 1.0):
        raise ValueError("u must lie in (0, 1]; u = 0 gives an infinite maximum")
    sigma_left = np.asarray(sigma_left, dtype=float)
    if np.any(sigma_left <= 0.0):
        raise ValueError("sigma_left must be positive")
    x_left = np.asarray(x_left, dtype=float)
    x_right = np.asarray(x_right, dtype=float)
    gap = x_right - x_left
    root = np.sqrt(gap * gap - 2.0 * sigma_left ** 2 * dt * np.log(u))
    out = 0.5 * (x_left + x_right + root)
    # the square root can round below |gap| when u is 1
    return np.maximum(out, np.maximum(x_left, x_right))


def euler_running_max(model: DiffusionModel, values: np.ndarray, dt: float,
                      u: np.ndarray) -> np.ndarray:
    """Per-path maximum of the continuous Euler scheme from its node values.

    ``values`` has shape (rows, steps + 1) and ``u`` shape (rows, steps).
    """
    left = values[:, :-1]
    peaks = bridge_max(left, values[:, 1:], model.s(left), dt, u)
    return peaks.max(axis=1)
