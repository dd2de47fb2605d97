"""Synchronous-coupling strong error sweep.

Every N of the sweep is driven by the same refinable Brownian paths, so the
Euler schemes at all N and the reference share their noise. The reference is
the exact law where one exists, otherwise a fine Euler proxy ``depth`` levels
below the finest N. Work runs window by window over level-0 steps so no
full fine path is ever held in memory.
"""

import logging
import math

import numpy as np

from experiments.fit import CheckResult, RateReport, RateRow
from experiments.runner import (
    ExperimentContext, block_groups, constant_sigma, dyadic_levels, fit_rows,
    mean_and_se, root_mean_square, run_items,
)
from simulate.brownian import BrownianSource, coarsen

logger = logging.getLogger(__name__)

GROUP_BLOCKS = 8
PROFILE_FRACTIONS = (0.25, 0.5, 1.0)
STRONG_SLOPE_RANGE = (-0.65, -0.35)
CONSTANT_SIGMA_SLOPE = -0.9
ROUNDOFF = 1.0e-10


class _Track:
    """Running per-path statistics of one Euler scheme against the reference."""

    def __init__(self, model, rows: int, N: int):
        self.model = model
        self.exited = np.zeros(rows, dtype=bool)
        self.x = np.full(rows, model.x0, dtype=float)
        self.sup_gap2 = np.zeros(rows)
        self.sup_x4 = np.full(rows, model.x0 ** 4)
        self.profile = np.zeros((rows, len(PROFILE_FRACTIONS)))
        self.marks = [int(math.floor(f * N + 1e-9)) for f in PROFILE_FRACTIONS]

    def record(self, node: int, reference: np.ndarray):
        self.exited |= ~self.model.in_domain(self.x)
        self.sup_gap2 = np.maximum(self.sup_gap2, (self.x - reference) ** 2)
        self.sup_x4 = np.maximum(self.sup_x4, self.x ** 4)
        for j, mark in enumerate(self.marks):
            if node == mark:
                self.profile[:, j] = self.sup_gap2


def _strong_group(ctx: ExperimentContext, source: BrownianSource, group, levels: list[int],
                  depth: int) -> dict:
    model = ctx.model
    T, base = source.T, source.N
    top = levels[-1]
    ref_level = top + depth
    rows = sum(stop - start for _, start, stop in group)
    exact = model.exact_law
    tracks = [_Track(model, rows, base * 2 ** j) for j in levels]
    ref = np.full(rows, model.x0, dtype=float)
    ref_exited = np.zeros(rows, dtype=bool)
    ref_dt = T / (base * 2 ** ref_level)
    stride = 2 ** depth

    for k0 in range(base):
        window = np.concatenate(
            [source.window(b, ref_level, k0)[: stop - start] for b, start, stop in group])
        # reference values at every node of the finest N grid inside this window
        nodes = np.empty((rows, 2 ** top))
        fine = np.ascontiguousarray(window.T)
        for i in range(fine.shape[0]):
            if exact is not None:
                ref = exact.step(ref, ref_dt, fine[i])
            else:
                ref = ref + model.s(ref) * fine[i] + model.b(ref) * ref_dt
            if (i + 1) % stride == 0:
                nodes[:, (i + 1) // stride - 1] = ref
                ref_exited |= ~model.in_domain(ref)
        for track, j in zip(tracks, levels):
            steps = 2 ** j
            dt = T / (base * steps)
            inc = coarsen(window, 2 ** (ref_level - j))
            spacing = 2 ** (top - j)
            for i in range(steps):
                track.x = track.x + model.s(track.x) * inc[:, i] + model.b(track.x) * dt
                track.record(k0 * steps + i + 1, nodes[:, (i + 1) * spacing - 1])

    outside = ref_exited | ~np.isfinite(ref)
    out = {}
    for track, j in zip(tracks, levels):
        censored = outside | track.exited | ~np.isfinite(track.sup_gap2)
        out[j] = {
            "sup_gap2": np.where(censored, np.nan, track.sup_gap2),
            "profile": np.where(censored[:, None], np.nan, track.profile),
            "sup_x4": np.where(censored, np.nan, track.sup_x4),
            "censored": censored,
        }
    return out


def run_strong_rate(ctx: ExperimentContext) -> RateReport:
    """E[sup_k |X_{t_k} − X̄_{t_k}|²]^{1/2} per N under the synchronous coupling."""
    cfg = ctx.config
    model = ctx.model
    n_list = cfg.grid.N
    levels = dyadic_levels(n_list)
    depth = 0 if model.exact_law is not None else cfg.proxy.depth
    if depth:
        ctx.flag(f"fine-Euler proxy depth {depth}")
    source = BrownianSource(cfg.seed, cfg.grid.T, n_list[0])
    source.check_level(levels[-1] + depth)
    groups = block_groups(cfg.samples.M, GROUP_BLOCKS)
    logger.info("Strong rate for %s: N=%s, M=%d, %d work items", model.describe(), n_list,
                cfg.samples.M, len(groups))

    parts = run_items(lambda g: _strong_group(ctx, source, g, levels, depth), groups,
                      ctx.workers, ctx.on_progress, label="strong-rate group")

    rows = []
    for n, j in zip(n_list, levels):
        sup_gap2 = np.concatenate([p[j]["sup_gap2"] for p in parts])
        profile = np.concatenate([p[j]["profile"] for p in parts])
        sup_x4 = np.concatenate([p[j]["sup_x4"] for p in parts])
        censored = int(sum(int(p[j]["censored"].sum()) for p in parts))
        estimate, se = root_mean_square(np.sqrt(sup_gap2))
        extra = {f"profile_t{f:g}": root_mean_square(np.sqrt(profile[:, i]))[0]
                 for i, f in enumerate(PROFILE_FRACTIONS)}
        extra["euler_moment4"] = mean_and_se(sup_x4)[0]
        rows.append(RateRow(N=n, estimate=estimate, std_error=se, censored=censored, extra=extra))
        logger.info("N=%d: strong error %.6g ± %.2g (%d censored)", n, estimate, se, censored)

    fit, note = fit_rows(rows, floor=ROUNDOFF)
    report = RateReport(experiment="strong-rate", model=model.describe(), rows=rows, fit=fit,
                        note=note, provenance=ctx.provenance())
    if all(r.estimate <= ROUNDOFF for r in rows):
        report.note = "Euler scheme exact at the grid nodes: all gaps at round-off level"
        report.checks.append(CheckResult(
            name="exact_at_nodes", passed=True,
            measured={"max_estimate": max(r.estimate for r in rows)},
            threshold=f"estimate <= {ROUNDOFF:g}"))
    elif fit is not None:
        if constant_sigma(model):
            report.checks.append(CheckResult(
                name="constant_sigma_slope", passed=fit.slope <= CONSTANT_SIGMA_SLOPE,
                measured={"slope": fit.slope}, threshold=f"slope <= {CONSTANT_SIGMA_SLOPE}"))
        else:
            lo, hi = STRONG_SLOPE_RANGE
            report.checks.append(CheckResult(
                name="strong_slope", passed=lo <= fit.slope <= hi,
                measured={"slope": fit.slope, "r_squared": fit.r_squared},
                threshold=f"{lo} <= slope <= {hi}"))
    return report
