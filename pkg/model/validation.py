import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from model.diffusion import DERIVATIVE_PARENTS, DiffusionModel

logger = logging.getLogger(__name__)

Level = Literal["lipschitz", "hyp1", "hyp2"]

LEVEL_ORDER: dict[str, int] = {"lipschitz": 0, "hyp1": 1, "hyp2": 2}


class ProbeSpec(BaseModel):
    """Probe grid used for numerical hypothesis checks.

    When ``lo``/``hi`` are omitted the range is x0 ± width·σ(x0)·√horizon
    (multiplicative for log-scale models).
    """
    lo: float | None = None
    hi: float | None = None
    points: int = Field(default=1001, ge=0)
    width: float = 6.0
    horizon: float = 1.0
    bound_threshold: float = 10.0
    lipschitz_max: float = 1.0e3
    ellipticity_tol: float = 1.0e-8


class ConditionResult(BaseModel):
    name: str
    passed: bool
    value: float
    witness: float | None = None
    detail: str = ""


class ValidationReport(BaseModel):
    model: str
    level: Level
    passed: bool
    lipschitz_constant: float
    ellipticity_estimate: float
    probe_range: tuple[float, float]
    conditions: list[ConditionResult]
    flags: list[str] = Field(default_factory=list)

    def failed(self) -> list[ConditionResult]:
        return [c for c in self.conditions if not c.passed]


def probe_grid(model: DiffusionModel, spec: ProbeSpec | None = None) -> np.ndarray:
    spec = spec or ProbeSpec()
    if spec.points == 0:
        return np.empty(0)
    if spec.lo is not None and spec.hi is not None:
        lo, hi = spec.lo, spec.hi
    else:
        lo, hi = model.support(spec.horizon, spec.width)
    return np.linspace(lo, hi, spec.points)


def _evaluate(model: DiffusionModel, parent: str, x: np.ndarray) -> np.ndarray:
    if parent == "b":
        return model.b(x)
    if parent == "sigma":
        return model.s(x)
    return model.a(x)


def check_derivatives(model: DiffusionModel, probes: np.ndarray,
                      h: float = 1.0e-5, rtol: float = 1.0e-6) -> list[ConditionResult]:
    """Compare each declared derivative with a central difference of its parent.

    The order-k derivative is checked against the central difference of the
    declared order k-1 derivative (or the parent function for k = 1).
    """
    results = []
    for key, (parent, order) in DERIVATIVE_PARENTS.items():
        deriv = model.derivative(key)
        if deriv is None:
            continue
        if order == 1:
            lower = lambda x, p=parent: _evaluate(model, p, x)
        else:
            lower = model.derivative(f"{parent}{order - 1}")
            if lower is None:
                continue
        fd = (lower(probes + h) - lower(probes - h)) / (2.0 * h)
        declared = deriv(probes)
        err = np.abs(fd - declared) / np.maximum(1.0, np.abs(declared))
        worst = int(np.argmax(err))
        results.append(ConditionResult(
            name=f"derivative_{key}",
            passed=bool(err[worst] <= rtol),
            value=float(err[worst]),
            witness=float(probes[worst]),
            detail=f"max relative gap against central difference, h={h:g}",
        ))
    return results


def _nth_derivative(model: DiffusionModel, parent: str, order: int,
                    probes: np.ndarray) -> np.ndarray:
    """Declared derivative when available, repeated np.gradient otherwise."""
    declared = model.derivative(f"{parent}{order}")
    if declared is not None:
        return declared(probes)
    values = _evaluate(model, parent, probes)
    for _ in range(order):
        values = np.gradient(values, probes)
    return values


def _bounded(name: str, values: np.ndarray, probes: np.ndarray,
             threshold: float) -> ConditionResult:
    mag = np.abs(values)
    worst = int(np.argmax(mag))
    passed = bool(np.all(np.isfinite(values)) and mag[worst] <= threshold)
    return ConditionResult(
        name=name, passed=passed, value=float(mag[worst]),
        witness=float(probes[worst]),
        detail="" if passed else f"unbounded {name.removeprefix('bounded_')} suspected",
    )


def validate_hypotheses(model: DiffusionModel, level: Level,
                        spec: ProbeSpec | None = None) -> ValidationReport:
    """Numerically check the Lipschitz / Hypothesis 1 / Hypothesis 2 conditions.

    Levels are cumulative, so a hyp2 pass implies hyp1 and lipschitz passes.
    """
    if level not in LEVEL_ORDER:
        raise ValueError(f"unknown hypothesis level {level!r}")
    spec = spec or ProbeSpec()
    x = probe_grid(model, spec)
    if x.size < 2 or not x[-1] > x[0]:
        raise ValueError("probe grid is empty")

    rank = LEVEL_ORDER[level]
    b = model.b(x)
    s = model.s(x)
    a = s * s
    conditions: list[ConditionResult] = []
    flags: list[str] = []

    dx = np.diff(x)
    quotients = (np.abs(np.diff(s)) + np.abs(np.diff(b))) / dx
    k_idx = int(np.argmax(quotients)) if quotients.size else 0
    lipschitz_constant = float(quotients[k_idx]) if quotients.size else 0.0
    conditions.append(ConditionResult(
        name="finite_coefficients",
        passed=bool(np.all(np.isfinite(b)) and np.all(np.isfinite(s))),
        value=float(np.count_nonzero(~np.isfinite(b) | ~np.isfinite(s))),
    ))
    conditions.append(ConditionResult(
        name="lipschitz",
        passed=lipschitz_constant <= spec.lipschitz_max,
        value=lipschitz_constant,
        witness=float(x[k_idx]),
    ))
    conditions.extend(check_derivatives(model, x[:: max(1, x.size // 101)]))

    a_idx = int(np.argmin(a))
    ellipticity = float(a[a_idx])
    if rank >= 1:
        floor_ok = ellipticity > spec.ellipticity_tol
        if model.ellipticity_floor > 0.0:
            floor_ok = floor_ok and ellipticity >= model.ellipticity_floor * (1.0 - 1e-12)
        conditions.append(ConditionResult(
            name="uniform_ellipticity", passed=bool(floor_ok), value=ellipticity,
            witness=float(x[a_idx]),
            detail="" if floor_ok else "a(x) touches zero or the declared floor",
        ))
        threshold = spec.bound_threshold
        conditions.append(_bounded("bounded_drift", b, x, threshold))
        conditions.append(_bounded("bounded_a", a, x, threshold))
        for order in (1, 2):
            conditions.append(_bounded(
                f"bounded_b{order}", _nth_derivative(model, "b", order, x), x, threshold))
            conditions.append(_bounded(
                f"bounded_a{order}", _nth_derivative(model, "a", order, x), x, threshold))
        # Hölder continuity of a'' is only checked through a bounded difference quotient.
        a2 = _nth_derivative(model, "a", 2, x)
        conditions.append(_bounded(
            "holder_a2", np.diff(a2) / dx, x[:-1], threshold))
    if rank >= 2:
        threshold = spec.bound_threshold
        conditions.append(_bounded(
            "bounded_b3", _nth_derivative(model, "b", 3, x), x, threshold))
        for order in (3, 4):
            conditions.append(_bounded(
                f"bounded_a{order}", _nth_derivative(model, "a", order, x), x, threshold))

    for c in conditions:
        if not c.passed and c.detail:
            flags.append(c.detail)
    passed = all(c.passed for c in conditions)
    report = ValidationReport(
        model=model.describe(), level=level, passed=passed,
        lipschitz_constant=lipschitz_constant,
        ellipticity_estimate=ellipticity,
        probe_range=(float(x[0]), float(x[-1])),
        conditions=conditions, flags=flags,
    )
    if passed:
        logger.info("%s passes %s (K=%.4g, floor=%.4g)", report.model, level,
                    lipschitz_constant, ellipticity)
    else:
        logger.warning("%s fails %s: %s", report.model, level,
                       ", ".join(c.name for c in report.failed()))
    return report

