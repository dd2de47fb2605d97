"""Weak error of lookback functionals of the continuous Euler scheme.

The running maximum of the Euler interpolation is simulated exactly, step by
step, from one uniform per step. Exact references come from the law of the
running maximum of Brownian motion with drift: bm_drift directly, gbm
through the exponential map.
"""

import logging
import math
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr

from errors import ModelError
from experiments.fit import CheckResult, RateReport, RateRow
from experiments.runner import (
    ExperimentContext, block_groups, dyadic_levels, fit_rows, mean_and_se, run_items,
)
from model.diffusion import DiffusionModel
from simulate.brownian import BrownianSource
from simulate.euler import GridSpec, euler_path
from simulate.lookback import euler_running_max

logger = logging.getLogger(__name__)

GROUP_BLOCKS = 64
RESOLVED_SE = 3.0
RATIO_FLOOR = math.sqrt(2.0)
TERMINAL_SLOPE = -0.9

PAYOFFS: dict[str, Callable[[np.ndarray, np.ndarray, float], np.ndarray]] = {
    "lookback_identity": lambda peak, end, k: peak,
    "lookback_call": lambda peak, end, k: np.maximum(peak - k, 0.0),
    "lookback_floating": lambda peak, end, k: peak - end,
    "terminal_call": lambda peak, end, k: np.maximum(end - k, 0.0),
}


def drifted_max_survival(m, nu: float, sigma: float, T: float):
    """P(sup_{t≤T}(νt + σW_t) > m) for m ≥ 0, by the reflection principle."""
    m = np.asarray(m, dtype=float)
    s = sigma * math.sqrt(T)
    direct = ndtr((nu * T - m) / s)
    reflected = np.exp(2.0 * nu * m / sigma ** 2 + log_ndtr((-m - nu * T) / s))
    return np.clip(direct + reflected, 0.0, 1.0)


class LookbackReference:
    """Exact expectations of lookback functionals for bm_drift and gbm.

    Both models are g(x0, νt + σW_t) with g additive (bm_drift) or
    multiplicative (gbm), so every expectation reduces to one quadrature
    against the running-maximum survival function.
    """

    def __init__(self, model: DiffusionModel, T: float):
        p = model.params
        self.T = float(T)
        self.x0 = float(model.x0)
        self.sigma = float(p["sigma"])
        if model.name == "bm_drift":
            self.nu = float(p["b"])
            self.mean_end = self.x0 + self.nu * T
            self._dg = lambda m: np.ones_like(np.asarray(m, dtype=float))
            self._g_inv = lambda v: v - self.x0
        elif model.name == "gbm":
            mu = float(p["mu"])
            self.nu = mu - 0.5 * self.sigma ** 2
            self.mean_end = self.x0 * math.exp(mu * T)
            self._dg = lambda m: self.x0 * np.exp(m)
            self._g_inv = lambda v: math.log(v / self.x0) if v > 0 else -math.inf
        else:
            raise ModelError(f"no exact lookback reference for {model.describe()}")
        self.model = model

    def _tail(self, lower: float) -> float:
        def integrand(m):
            return float(self._dg(m) * drifted_max_survival(m, self.nu, self.sigma, self.T))
        value, _ = integrate.quad(integrand, max(lower, 0.0), math.inf, epsabs=1e-13,
                                  epsrel=1e-12, limit=200)
        return value

    def expected_max(self) -> float:
        return self.x0 + self._tail(0.0)

    def max_call(self, strike: float) -> float:
        """E[(max X − K)⁺]; the maximum never falls below x0."""
        return max(self.x0 - strike, 0.0) + self._tail(self._g_inv(strike))

    def terminal_call(self, strike: float) -> float:
        s = self.sigma * math.sqrt(self.T)
        if self.model.name == "bm_drift":
            d = (self.mean_end - strike) / s
            density = math.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
            return (self.mean_end - strike) * float(ndtr(d)) + s * density
        if strike <= 0.0:
            return self.mean_end - strike
        d1 = (math.log(self.mean_end / strike) + 0.5 * s * s) / s
        return self.mean_end * float(ndtr(d1)) - strike * float(ndtr(d1 - s))

    def value(self, payoff: str, strike: float) -> float:
        if payoff == "lookback_identity":
            return self.expected_max()
        if payoff == "lookback_call":
            return self.max_call(strike)
        if payoff == "lookback_floating":
            return self.expected_max() - self.mean_end
        if payoff == "terminal_call":
            return self.terminal_call(strike)
        raise ValueError(f"unknown payoff {payoff!r}")


def _lookback_group(ctx: ExperimentContext, source: BrownianSource, group, levels: list[int],
                    payoff: str, strike: float) -> dict:
    model = ctx.model
    f = PAYOFFS[payoff]
    out = {}
    for j in levels:
        grid = GridSpec(T=source.T, N=source.N * 2 ** j)
        inc = np.concatenate([source.block_increments(b, j)[: stop - start]
                              for b, start, stop in group])
        u = np.concatenate([source.uniforms(b, j)[: stop - start] for b, start, stop in group])
        bundle = euler_path(model, grid, inc, on_exit="censor")
        censored = bundle.censored
        values = np.where(censored[:, None], model.x0, bundle.values)
        peak = euler_running_max(model, values, grid.dt, u)
        result = f(peak, values[:, -1], strike)
        out[j] = np.where(censored, np.nan, result)
    return out


def run_lookback_bias(ctx: ExperimentContext) -> RateReport:
    """Bias of the bridge-corrected Euler estimator against the exact reference, per N."""
    cfg = ctx.config
    model = ctx.model
    payoff, strike = cfg.lookback.payoff, cfg.lookback.strike
    T, n_list = cfg.grid.T, cfg.grid.N
    reference = LookbackReference(model, T).value(payoff, strike)
    levels = dyadic_levels(n_list)
    source = BrownianSource(cfg.seed, T, n_list[0])
    source.check_level(levels[-1])
    groups = block_groups(cfg.samples.M, GROUP_BLOCKS)
    logger.info("Lookback bias for %s, %s(K=%g): reference %.12g, N=%s, M=%d",
                model.describe(), payoff, strike, reference, n_list, cfg.samples.M)

    parts = run_items(lambda g: _lookback_group(ctx, source, g, levels, payoff, strike), groups,
                      ctx.workers, ctx.on_progress, label="lookback-bias group")

    rows = []
    for n, j in zip(n_list, levels):
        samples = np.concatenate([p[j] for p in parts])
        censored = int(np.count_nonzero(~np.isfinite(samples)))
        mc, se = mean_and_se(samples)
        bias = mc - reference
        rows.append(RateRow(N=n, estimate=abs(bias), std_error=se, censored=censored, extra={
            "bias": bias, "mc_value": mc, "reference": reference,
            "ci_low": bias - 1.96 * se, "ci_high": bias + 1.96 * se,
        }))
        logger.info("N=%d: bias %.4g ± %.2g", n, bias, se)

    resolved = [r for r in rows if r.estimate > RESOLVED_SE * r.std_error]
    fit, note = fit_rows(resolved) if len(resolved) >= 3 else (None, "rate indeterminate at this M")
    if note:
        logger.warning("Lookback bias: %s", note)
    report = RateReport(experiment="lookback-bias", model=model.describe(), rows=rows, fit=fit,
                        note=note, provenance=ctx.provenance())

    if model.constant_coefficients:
        worst = max(r.estimate / r.std_error for r in rows if r.std_error > 0)
        report.checks.append(CheckResult(
            name="exact_scheme_unbiased", passed=worst <= RESOLVED_SE,
            measured={"max_bias_over_se": worst}, threshold="|bias| <= 3 SE at every N"))
    elif payoff == "terminal_call":
        if fit is not None:
            report.checks.append(CheckResult(
                name="terminal_slope", passed=fit.slope <= TERMINAL_SLOPE,
                measured={"slope": fit.slope}, threshold=f"slope <= {TERMINAL_SLOPE}"))
    else:
        decreasing = all(b.estimate < a.estimate for a, b in zip(rows, rows[1:]))
        ratios = {}
        for a, b in zip(rows, rows[1:]):
            resolved_pair = min(a.estimate / a.std_error, b.estimate / b.std_error) > RESOLVED_SE
            if b.N == 2 * a.N and resolved_pair:
                ratios[f"ratio_N{a.N}"] = a.estimate / b.estimate
        report.checks.append(CheckResult(
            name="bias_decreasing", passed=decreasing,
            measured={f"abs_bias_N{r.N}": r.estimate for r in rows},
            threshold="|bias| strictly decreasing in N"))
        report.checks.append(CheckResult(
            name="bias_ratio", passed=all(v >= RATIO_FLOOR for v in ratios.values()),
            measured=ratios, threshold="bias(N)/bias(2N) >= sqrt(2) where resolved"))
    return report
