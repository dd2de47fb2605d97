import logging
import math
from datetime import datetime, timezone
from typing import Any

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

logger = logging.getLogger(__name__)


class RateFit(BaseModel):
    """Weighted least-squares fit of log(error) against log(N)."""
    slope: float
    intercept: float
    r_squared: float
    slope_ci: tuple[float, float]
    points: int


class RateRow(BaseModel):
    N: int
    m: int = 1
    estimate: float
    std_error: float
    censored: int = 0
    extra: dict[str, float] = Field(default_factory=dict)


class Provenance(BaseModel):
    config_hash: str
    version: str
    deviations: list[str] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)


class CheckResult(BaseModel):
    name: str
    passed: bool
    measured: dict[str, float] = Field(default_factory=dict)
    threshold: str = ""
    detail: str = ""


class RateReport(BaseModel):
    experiment: str
    model: str
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    rows: list[RateRow] = Field(default_factory=list)
    fit: RateFit | None = None
    note: str | None = None
    checks: list[CheckResult] = Field(default_factory=list)
    provenance: Provenance

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class SuiteReport(BaseModel):
    experiment: str
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    checks: list[CheckResult] = Field(default_factory=list)
    provenance: Provenance

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def rate_fit(points, weights=None) -> RateFit:
    """Fit log(error) = intercept + slope·log(N).

    Args:
        points: (k, 2) array of (N, error) pairs, k ≥ 3, errors > 0
        weights: optional standard errors of the errors; each point is then
            weighted by 1/(se/error)², the inverse variance of log(error)
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an array of (N, error) pairs")
    k = pts.shape[0]
    if k < 3:
        raise ValueError(f"rate_fit needs at least 3 points, got {k}")
    n_values, errors = pts[:, 0], pts[:, 1]
    if np.any(~(errors > 0.0)):
        raise ValueError("non-positive error value in rate_fit")
    if np.any(~(n_values > 0.0)):
        raise ValueError("N values must be positive")

    x, y = np.log(n_values), np.log(errors)
    w = np.ones(k)
    if weights is not None:
        se = np.asarray(weights, dtype=float)
        rel = se / errors
        if np.all(rel > 0.0):
            w = 1.0 / rel ** 2
        else:
            logger.warning("rate_fit: zero standard errors, falling back to equal weights")
    w = w / w.sum()

    x_bar, y_bar = float(w @ x), float(w @ y)
    sxx = float(w @ (x - x_bar) ** 2)
    if sxx == 0.0:
        raise ValueError("rate_fit needs at least two distinct N values")
    slope = float(w @ ((x - x_bar) * (y - y_bar))) / sxx
    intercept = y_bar - slope * x_bar
    resid = y - intercept - slope * x
    ss_res = float(w @ resid ** 2)
    ss_tot = float(w @ (y - y_bar) ** 2)
    r2 = 1.0 if ss_tot == 0.0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    # weights normalized to 1: residual variance carries the effective scale k/(k−2)
    slope_se = math.sqrt(ss_res * k / (k - 2) / (k * sxx)) if ss_res > 0.0 else 0.0
    half = float(stats.t.ppf(0.975, k - 2)) * slope_se
    return RateFit(slope=slope, intercept=intercept, r_squared=r2,
                   slope_ci=(slope - half, slope + half), points=k)
