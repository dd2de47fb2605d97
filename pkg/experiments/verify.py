"""Seed-pinned invariant suite.

Every check returns a ``CheckResult`` with the measured values next to its
threshold. KS thresholds hold at the shipped seed; other seeds may flip a
statistical check with probability about the test level.
"""

import logging
import math
from typing import Callable

import numpy as np
from scipy import stats

from bridge.paths import bridge_lipschitz, bridge_path
from bridge.reconstruct import P_THRESHOLD, reconstruct_check
from bridge.score import BridgeScore, g_estimate
from coupling.assemble import assemble_coupled_paths, reconstruct_beta
from coupling.fill import euler_bridge_fill
from coupling.transport import DiscreteMeasure, empirical_w1d, ot_bruteforce
from density.conditional import ConditionalLaws, start_grid
from density.euler_marginal import euler_marginal_evolve
from density.fokker_planck import fokker_planck_evolve
from density.law import MeshSpec
from density.residual import inverse_cdf_pde_residual
from errors import WasserpathError
from experiments.fit import CheckResult, SuiteReport
from experiments.runner import ExperimentContext, run_items
from model.diffusion import builtin
from model.lamperti import lamperti
from model.validation import ProbeSpec, validate_hypotheses
from simulate.brownian import BrownianSource, Stream, block_generator, coarsen
from simulate.euler import GridSpec, euler_path, exact_path

logger = logging.getLogger(__name__)

OT_TOL = 1.0e-12
MASS_TOL = 1.0e-7
RESIDUAL_TOL = 1.0e-3
RESIDUAL_REDUCTION = 3.0
RESIDUAL_U_STEP = 1.0e-3
RESIDUAL_SLICES = 256
ROUND_TRIP_TOL = 1.0e-12
SCORE_TABLE_TOL = 1.0e-9
SCORE_INNER_STEPS = 256
LIPSCHITZ_BAND = 0.25
SCORE_PROBES = 50

OT_HEADER = ("instance", "n", "p", "sorted", "bruteforce", "abs_diff")
CHECK_HEADER = ("check", "passed", "quantity", "value")


def _ot_instance(seed: int, i: int) -> tuple[int, int, float, float]:
    rng = block_generator(seed, Stream.CHECK, 1, i)
    n = int(rng.integers(1, 8))
    p = int(rng.choice([1, 2, 3]))
    a = rng.uniform(-5.0, 5.0, n)
    b = rng.uniform(-5.0, 5.0, n)
    fast = empirical_w1d(a, b, p)
    brute = ot_bruteforce(DiscreteMeasure.uniform(a), DiscreteMeasure.uniform(b), p,
                          use_solver=False)
    return n, p, fast, brute


def ot_rows(seed: int, instances: int) -> list[tuple]:
    rows = []
    for i in range(instances):
        n, p, fast, brute = _ot_instance(seed, i)
        rows.append((i, n, p, fast, brute, abs(fast - brute)))
    return rows


def ot_equivalence(rows: list[tuple]) -> CheckResult:
    worst = max(r[-1] for r in rows)
    return CheckResult(name="ot_equivalence", passed=worst <= OT_TOL,
                       measured={"instances": float(len(rows)), "max_abs_diff": worst},
                       threshold=f"|sorted - bruteforce| <= {OT_TOL:g}")


def check_ot_equivalence(ctx: ExperimentContext) -> CheckResult:
    return ot_equivalence(ot_rows(ctx.config.seed, ctx.config.verify.ot_instances))


def check_ot_examples(ctx: ExperimentContext) -> CheckResult:
    three = empirical_w1d([0.0, 1.0, 3.0], [0.0, 2.0, 3.0], p=1)
    split = ot_bruteforce(DiscreteMeasure.uniform([0.0, 1.0]),
                          DiscreteMeasure.uniform([0.5, 0.5]), p=1)
    err = max(abs(three - 1.0 / 3.0), abs(split - 0.5))
    return CheckResult(name="ot_examples", passed=err <= OT_TOL,
                       measured={"w1_three_atoms": three, "w1_split": split},
                       threshold="1/3 and 1/2 to 1e-12")


def check_mass_conservation(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    worst = {}
    for name in ("bm_drift", "sin_elliptic"):
        model = builtin(name)
        mesh = MeshSpec.for_model(model, cfg.grid.T, width=cfg.mesh.width, nodes=cfg.mesh.nodes)
        fp = fokker_planck_evolve(model, cfg.grid.T, mesh)
        euler = euler_marginal_evolve(model, GridSpec(T=cfg.grid.T, N=16), mesh)
        worst[f"fp_{name}"] = fp.max_mass_drift
        worst[f"euler_{name}"] = euler.max_mass_drift
    return CheckResult(name="mass_conservation", passed=max(worst.values()) <= MASS_TOL,
                       measured=worst, threshold=f"mass drift <= {MASS_TOL:g}")


def _residual(model, T: float, nodes: int, steps: int, width: float, u_step: float,
              slices: int) -> float:
    mesh = MeshSpec.for_model(model, T, width=width, nodes=nodes)
    times = np.arange(1, slices + 1) * (T / slices)
    laws = fokker_planck_evolve(model, T, mesh, output_times=times, steps=steps)
    return inverse_cdf_pde_residual(laws, model, u_step=u_step, t_min=0.5 * T).max_residual


def check_quantile_residual(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    model = builtin("bm_drift", {"b": 0.3})
    # the second run halves every discretisation step
    base = _residual(model, cfg.grid.T, cfg.mesh.nodes, 512, cfg.mesh.width,
                     RESIDUAL_U_STEP, RESIDUAL_SLICES)
    halved = _residual(model, cfg.grid.T, 2 * cfg.mesh.nodes, 1024, cfg.mesh.width,
                       RESIDUAL_U_STEP / 2, 2 * RESIDUAL_SLICES)
    ratio = base / halved if halved > 0 else math.inf
    return CheckResult(
        name="quantile_flow_residual", passed=base < RESIDUAL_TOL and ratio >= RESIDUAL_REDUCTION,
        measured={"residual": base, "residual_halved_mesh": halved, "reduction": ratio},
        threshold=f"residual < {RESIDUAL_TOL:g}, reduction >= {RESIDUAL_REDUCTION:g}")


def check_bridge_reconstruction(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    measured = {}
    passed = True
    for name in ("bm_drift", "ou"):
        report = reconstruct_check(builtin(name), cfg.grid.T, cfg.verify.samples, cfg.seed)
        passed &= report.passed
        measured.update({f"{name}_{k}": v for k, v in report.pvalues.items()})
    control = reconstruct_check(builtin("bm_drift"), cfg.grid.T, cfg.verify.samples, cfg.seed,
                                shuffle=True)
    # the shuffled control must be rejected
    passed &= not control.passed
    measured.update({f"shuffled_{k}": v for k, v in control.pvalues.items()})
    return CheckResult(name="bridge_reconstruction", passed=passed, measured=measured,
                       threshold=f"p > {P_THRESHOLD} for bridges, some p <= {P_THRESHOLD} "
                                 "for the shuffled control")


def check_bridge_midpoint(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    model = builtin("bm_drift")
    rows, steps = cfg.verify.samples, 256
    rng = block_generator(cfg.seed, Stream.CHECK, 2, 0)
    inc = rng.standard_normal((rows, steps)) * math.sqrt(1.0 / steps)
    path = bridge_path(model, 0.0, 0.0, (0.0, 1.0), inc)
    result = stats.kstest(path.values[:, steps // 2], stats.norm(0.0, 0.5).cdf)
    return CheckResult(name="brownian_bridge_midpoint", passed=result.pvalue > P_THRESHOLD,
                       measured={"pvalue": float(result.pvalue),
                                 "statistic": float(result.statistic)},
                       threshold=f"KS p > {P_THRESHOLD} against N(0, 1/4)")


def check_g_constant_alpha(ctx: ExperimentContext) -> CheckResult:
    alpha = lamperti(builtin("bm_drift", {"b": 0.3, "sigma": 1.5})).alpha_bundle()
    value, se = g_estimate(alpha, 0.5, 0.1, -0.2, mg=1024, seed=ctx.config.seed)
    return CheckResult(name="g_constant_alpha", passed=value == 0.0 and se == 0.0,
                       measured={"g": value, "se": se}, threshold="g = 0 exactly")


def check_lamperti_score(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    inner = max(cfg.bridge.inner_steps, SCORE_INNER_STEPS)
    measured = {}
    passed = True
    for key, (name, lo, hi) in enumerate((("ou", -1.0, 1.0), ("gbm", 0.5, 2.0))):
        model = builtin(name)
        mc = BridgeScore(model, mode="lamperti_mc", mg=cfg.bridge.mg, seed=cfg.seed,
                         inner_steps=inner, cache=False)
        rng = block_generator(cfg.seed, Stream.CHECK, 3, key)
        t = rng.uniform(0.1, 1.0, SCORE_PROBES)
        x = rng.uniform(lo, hi, SCORE_PROBES)
        y = rng.uniform(lo, hi, SCORE_PROBES)
        estimate, se = mc.lamperti_score(t, x, y)
        exact = np.array([float(model.exact_law.score(ti, xi, yi))
                          for ti, xi, yi in zip(t, x, y)])
        gap = np.abs(estimate - exact)
        # interpolation floor of the tabulated Lamperti map
        excess = gap - 3.0 * se - SCORE_TABLE_TOL * (1.0 + np.abs(exact))
        passed &= bool(np.all(excess <= 0.0))
        measured.update({f"{name}_max_abs_diff": float(gap.max()),
                         f"{name}_max_se": float(np.max(se)),
                         f"{name}_worst_excess": float(np.max(excess))})
    return CheckResult(name="lamperti_score", passed=passed, measured=measured,
                       threshold=f"|mc - closed form| <= 3 SE at {SCORE_PROBES} probes "
                                 "for ou and gbm")


def check_endpoint_lipschitz(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    model = builtin("sin_elliptic")
    score = BridgeScore(model, mode="lamperti_expansion")
    rng = block_generator(cfg.seed, Stream.CHECK, 4, 0)
    inc = rng.standard_normal((512, 128)) * math.sqrt(1.0 / 128)
    c1 = bridge_lipschitz(model, 0.0, 0.5, (0.0, 1.0), inc, 0.01, score)
    c2 = bridge_lipschitz(model, 0.0, 0.5, (0.0, 1.0), inc, 0.005, score)
    change = abs(c2 / c1 - 1.0)
    return CheckResult(name="endpoint_lipschitz", passed=change <= LIPSCHITZ_BAND,
                       measured={"C_eps": c1, "C_half_eps": c2, "relative_change": change},
                       threshold=f"relative change <= {LIPSCHITZ_BAND:g}")


def check_beta_round_trip(ctx: ExperimentContext) -> CheckResult:
    model = builtin("sin_elliptic")
    grid = GridSpec.with_default_m(1.0, 16)
    rng = block_generator(ctx.config.seed, Stream.CHECK, 5, 0)
    inc = rng.standard_normal((100, grid.N)) * math.sqrt(grid.dt)
    bundle = euler_path(model, grid, inc)
    beta = reconstruct_beta(model, bundle.values, grid)
    err = float(np.max(np.abs(beta - inc)))
    return CheckResult(name="beta_round_trip", passed=err <= ROUND_TRIP_TOL,
                       measured={"max_abs_diff": err}, threshold=f"<= {ROUND_TRIP_TOL:g}")


def check_beta_normality(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    model = builtin("sin_elliptic")
    grid = GridSpec.with_default_m(1.0, 16)
    rows = max(64, cfg.verify.samples // grid.N)
    rng = block_generator(cfg.seed, Stream.CHECK, 6, 0)
    chain = euler_path(model, grid, rng.standard_normal((rows, grid.N)) * math.sqrt(grid.dt))
    coarse = chain.values[:, grid.coarse_indices]
    filled = euler_bridge_fill(model, grid, coarse, cfg.seed, block=0,
                               nodes=cfg.fill.nodes, width=cfg.fill.width)
    beta = reconstruct_beta(model, filled.values[~filled.failed_rows], grid)
    result = stats.kstest(beta.ravel() / math.sqrt(grid.dt), "norm")
    return CheckResult(name="beta_normality", passed=result.pvalue > P_THRESHOLD,
                       measured={"pvalue": float(result.pvalue), "samples": float(beta.size),
                                 "fill_failures": float(len(filled.failed))},
                       threshold=f"KS p > {P_THRESHOLD} against N(0, T/N)")


def check_law_preservation(ctx: ExperimentContext) -> CheckResult:
    cfg = ctx.config
    model = builtin("sin_elliptic")
    grid = GridSpec.with_default_m(1.0, 16)
    level = cfg.bridge.level
    source = BrownianSource(cfg.seed, grid.T, grid.N)
    laws = ConditionalLaws(model, grid.dt, start_grid(model, grid.T))
    score = BridgeScore(model, mode="lamperti_expansion")
    blocks = max(1, cfg.verify.samples // 2048)
    ybar_end, chi_mid, tilde_mid = [], [], []
    probe = (grid.coarse_indices[0] + grid.coarse_indices[1]) * 2 ** level // 2
    for block in range(blocks):
        inc = source.block_increments(block, level)
        X = exact_path(model, grid, inc, proxy_level=level)
        paths = assemble_coupled_paths(model, grid, X, cfg.seed, laws, score, block=block,
                                       fill_nodes=cfg.fill.nodes, fill_width=cfg.fill.width)
        keep = ~paths.censored
        ybar_end.append(paths.ybar[keep, -1])
        chi_mid.append(paths.chi[keep, probe])
        tilde_mid.append(paths.chi_tilde[keep, probe])
    mesh = MeshSpec.for_model(model, grid.T, width=cfg.mesh.width, nodes=cfg.mesh.nodes)
    law = euler_marginal_evolve(model, grid, mesh).at(grid.T)
    terminal = stats.kstest(np.concatenate(ybar_end), law.cdf_at)
    interior = stats.ks_2samp(np.concatenate(tilde_mid), np.concatenate(chi_mid))
    return CheckResult(
        name="law_preservation",
        passed=terminal.pvalue > P_THRESHOLD and interior.pvalue > P_THRESHOLD,
        measured={"ybar_terminal_pvalue": float(terminal.pvalue),
                  "chi_tilde_interior_pvalue": float(interior.pvalue)},
        threshold=f"KS p > {P_THRESHOLD}")


def check_refinement_consistency(ctx: ExperimentContext) -> CheckResult:
    source = BrownianSource(ctx.config.seed, 1.0, 8)
    fine = source.block_increments(0, 3)
    err = float(np.max(np.abs(coarsen(fine, 8) - source.level0(0))))
    window = source.window(0, 3, 5)
    same = bool(np.array_equal(window, fine[:, 40:48]))
    return CheckResult(name="brownian_refinement", passed=err <= ROUND_TRIP_TOL and same,
                       measured={"max_coarsen_diff": err, "window_consistent": float(same)},
                       threshold="children sum to parents; windows are order independent")


def check_hypotheses(ctx: ExperimentContext) -> CheckResult:
    probe = ctx.config.probe
    lo, hi = probe.range if probe.range else (None, None)
    spec = ProbeSpec(lo=lo, hi=hi, points=probe.points, bound_threshold=probe.bound_threshold,
                     horizon=ctx.config.grid.T)
    report = validate_hypotheses(ctx.model, "hyp2", spec)
    return CheckResult(name="hypotheses", passed=report.passed,
                       measured={"lipschitz_constant": report.lipschitz_constant,
                                 "ellipticity": report.ellipticity_estimate},
                       threshold=f"{ctx.model.describe()} satisfies hyp2 on the probe grid",
                       detail="; ".join(report.flags))


Check = Callable[[ExperimentContext], CheckResult]

CHECKS: list[Check] = [
    check_ot_equivalence,
    check_ot_examples,
    check_refinement_consistency,
    check_mass_conservation,
    check_quantile_residual,
    check_bridge_reconstruction,
    check_bridge_midpoint,
    check_g_constant_alpha,
    check_lamperti_score,
    check_endpoint_lipschitz,
    check_beta_round_trip,
    check_beta_normality,
    check_law_preservation,
    check_hypotheses,
]


def _guarded(check: Check, ctx: ExperimentContext) -> CheckResult:
    name = check.__name__.removeprefix("check_")
    try:
        result = check(ctx)
    except (WasserpathError, ValueError) as e:
        logger.error("Check %s raised: %s", name, e)
        return CheckResult(name=name, passed=False, detail=f"{type(e).__name__}: {e}")
    level = logging.INFO if result.passed else logging.WARNING
    logger.log(level, "Check %s: %s", result.name, "pass" if result.passed else "FAIL")
    return result


def run_verify(ctx: ExperimentContext, checks: list[Check] | None = None) -> SuiteReport:
    """Run the invariant suite; one CheckResult per invariant, in a fixed order."""
    selected = CHECKS if checks is None else checks
    results = run_items(lambda c: _guarded(c, ctx), selected, ctx.workers, ctx.on_progress,
                        label="verify check")
    return SuiteReport(experiment="verify", checks=results, provenance=ctx.provenance())


def run_ot_check(ctx: ExperimentContext) -> tuple[SuiteReport, list[tuple]]:
    """OT oracle equivalence on random small instances, with one CSV row per instance."""
    rows = ot_rows(ctx.config.seed, ctx.config.verify.ot_instances)
    checks = [ot_equivalence(rows), check_ot_examples(ctx)]
    report = SuiteReport(experiment="ot-check", checks=checks, provenance=ctx.provenance())
    return report, rows


def check_rows(report: SuiteReport) -> list[tuple]:
    """Flatten a suite report to (check, passed, quantity, value) CSV rows."""
    rows = []
    for c in report.checks:
        if not c.measured:
            rows.append((c.name, int(c.passed), "", math.nan))
        for key, value in c.measured.items():
            rows.append((c.name, int(c.passed), key, value))
    return rows
