"""Tests for the experiment layer:
- Log-log rate fitting
- Work-item plumbing and accumulators
- Strong, lookback, marginal and pathwise sweeps on small configs
- Invariant checks of the verify suite
- Report tables and CSV output
"""

import csv
import math
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from config import build_experiment_config
from coupling.assemble import SUMMARY_HEADER
from errors import ConfigError, ModelError
from experiments.fit import RateReport, RateRow, rate_fit
from experiments.lookback import LookbackReference, drifted_max_survival, run_lookback_bias
from experiments.marginal import output_times, run_marginal_rate
from experiments.pathwise import run_pathwise_rate
from experiments.runner import (
    MARKOVIAN_COUPLING, ExperimentContext, block_groups, dyadic_levels, fit_rows, mean_and_se,
    root_mean_square, run_items,
)
from experiments.strong import run_strong_rate
from experiments.verify import (
    check_beta_normality, check_beta_round_trip, check_bridge_reconstruction,
    check_g_constant_alpha, check_hypotheses, check_lamperti_score, check_law_preservation,
    check_ot_examples, check_quantile_residual, check_refinement_consistency, check_rows,
    run_ot_check, run_verify,
)
from export.report import ReportWriter, format_cell, rate_table, write_rows
from model.diffusion import builtin

SEED = 20240611


def _context(workers: int = 1, **sections) -> ExperimentContext:
    data = {"seed": SEED, "workers": workers}
    data.update(sections)
    return ExperimentContext.from_config(build_experiment_config(data))


class TestRateFit(unittest.TestCase):
    """Weighted least squares in log-log coordinates."""

    def test_exact_power_law(self):
        """error = N^{-1/2}: slope −0.5 with R² = 1."""
        n = np.array([8, 16, 32, 64, 128])
        fit = rate_fit(np.column_stack([n, n ** -0.5]))
        self.assertAlmostEqual(fit.slope, -0.5, places=12)
        self.assertAlmostEqual(fit.r_squared, 1.0, places=12)
        self.assertEqual(fit.points, 5)

    def test_log_factor_flattens_slope(self):
        """error = N^{-1}·√log N on N = 4..128 fits a slope of about −0.823."""
        n = 2.0 ** np.arange(2, 8)
        fit = rate_fit(np.column_stack([n, np.sqrt(np.log(n)) / n]))
        self.assertAlmostEqual(fit.slope, -0.823, delta=0.01)
        self.assertLess(fit.slope_ci[0], fit.slope)
        self.assertGreater(fit.slope_ci[1], fit.slope)

    def test_small_noise_small_change(self):
        """±1% perturbations move the slope by less than 0.03."""
        n = 2.0 ** np.arange(3, 10)
        clean = n ** -1.0
        noisy = clean * np.array([1.01, 0.99, 1.01, 0.99, 1.01, 0.99, 1.01])
        self.assertLess(abs(rate_fit(np.column_stack([n, noisy])).slope + 1.0), 0.03)

    def test_weights_follow_relative_error(self):
        """A point with a huge standard error barely influences the fit."""
        n = np.array([8.0, 16.0, 32.0, 64.0])
        err = n ** -1.0
        err[-1] *= 10.0
        se = err * np.array([0.01, 0.01, 0.01, 100.0])
        self.assertAlmostEqual(rate_fit(np.column_stack([n, err]), se).slope, -1.0, delta=0.01)

    def test_invalid_points(self):
        """Fewer than three points or a non-positive error raise."""
        with self.assertRaises(ValueError):
            rate_fit([[8, 0.1], [16, 0.05]])
        with self.assertRaises(ValueError):
            rate_fit([[8, 0.1], [16, 0.0], [32, 0.02]])

    def test_fit_rows_notes_indeterminate(self):
        """Rows at round-off give a note, not a fit."""
        rows = [RateRow(N=n, estimate=1e-16, std_error=0.0) for n in (8, 16, 32)]
        fit, note = fit_rows(rows, floor=1e-10)
        self.assertIsNone(fit)
        self.assertIn("indeterminate", note)


class TestRunner(unittest.TestCase):
    """Ordering, grouping and accumulation helpers."""

    def test_run_items_keeps_order(self):
        """Results come back in item order whatever the completion order."""
        items = list(range(20))
        self.assertEqual(run_items(lambda i: i * i, items, workers=4), [i * i for i in items])

    def test_progress_reports_every_item(self):
        """The callback sees completion counts up to the total."""
        seen = []
        run_items(lambda i: i, [1, 2, 3], on_progress=lambda c, t, s: seen.append((c, t)))
        self.assertEqual(seen, [(1, 3), (2, 3), (3, 3)])

    def test_dyadic_levels(self):
        """N = N_0·2^j gives j; anything else is a config error."""
        self.assertEqual(dyadic_levels([8, 16, 64]), [0, 1, 3])
        with self.assertRaises(ConfigError):
            dyadic_levels([8, 24])

    def test_block_groups(self):
        """130 paths make three blocks, grouped two at a time."""
        groups = block_groups(130, 2)
        self.assertEqual([len(g) for g in groups], [2, 1])
        self.assertEqual(groups[1][0][2] - groups[1][0][1], 2)

    def test_mean_and_se_ignores_nan(self):
        """Censored (NaN) entries are left out."""
        mean, se = mean_and_se([1.0, 2.0, math.nan, 3.0])
        self.assertEqual(mean, 2.0)
        self.assertAlmostEqual(se, 1.0 / math.sqrt(3.0), places=15)

    def test_root_mean_square(self):
        """RMS of (3, 4) is √12.5."""
        self.assertAlmostEqual(root_mean_square([3.0, 4.0])[0], math.sqrt(12.5), places=14)

    def test_provenance_ignores_workers(self):
        """The config hash is the same for every worker count."""
        a = _context(workers=1).provenance()
        b = _context(workers=4).provenance()
        self.assertEqual(a.config_hash, b.config_hash)
        self.assertTrue(a.version.startswith("wasserpath"))


class TestStrongRate(unittest.TestCase):
    """Synchronous-coupling sweep."""

    def test_constant_coefficients_exact_at_nodes(self):
        """bm_drift: every estimate at round-off, reported as a note."""
        ctx = _context(model={"name": "bm_drift", "params": {"b": 0.3}},
                       grid={"N": [8, 16, 32]}, samples={"M": 128})
        report = run_strong_rate(ctx)
        self.assertIsNone(report.fit)
        self.assertIn("exact", report.note)
        self.assertTrue(report.passed)
        self.assertEqual([r.N for r in report.rows], [8, 16, 32])

    def test_worker_count_does_not_change_results(self):
        """ou with one and three workers gives identical rows."""
        sections = {"model": {"name": "ou"}, "grid": {"N": [8, 16, 32]}, "samples": {"M": 1024}}
        one = run_strong_rate(_context(workers=1, **sections))
        three = run_strong_rate(_context(workers=3, **sections))
        self.assertEqual([r.estimate for r in one.rows], [r.estimate for r in three.rows])
        self.assertEqual(one.provenance.config_hash, three.provenance.config_hash)
        self.assertTrue(all(r.estimate > 0 for r in one.rows))
        self.assertIsNotNone(one.fit)

    def test_non_dyadic_grid_rejected(self):
        """Shared Brownian paths need N_0·2^j."""
        ctx = _context(model={"name": "ou"}, grid={"N": [8, 12, 16]}, samples={"M": 128})
        with self.assertRaises(ConfigError):
            run_strong_rate(ctx)


class TestLookback(unittest.TestCase):
    """Exact references and the bias sweep."""

    def test_survival_at_zero(self):
        """The maximum is never below the start."""
        self.assertAlmostEqual(float(drifted_max_survival(0.0, 0.3, 1.0, 1.0)), 1.0, places=14)

    def test_brownian_references(self):
        """E max W on [0, 1] is √(2/π); E(W_1)⁺ is 1/√(2π)."""
        ref = LookbackReference(builtin("bm_drift"), 1.0)
        self.assertAlmostEqual(ref.expected_max(), math.sqrt(2.0 / math.pi), places=9)
        self.assertAlmostEqual(ref.value("lookback_floating", 0.0), math.sqrt(2.0 / math.pi),
                               places=9)
        self.assertAlmostEqual(ref.value("terminal_call", 0.0), 1.0 / math.sqrt(2.0 * math.pi),
                               places=12)

    def test_gbm_terminal_call(self):
        """μ = 0, σ = 0.3, x0 = K = 1: 2Φ(0.15) − 1."""
        ref = LookbackReference(builtin("gbm", {"mu": 0.0, "sigma": 0.3}), 1.0)
        self.assertAlmostEqual(ref.value("terminal_call", 1.0), 0.1192354, delta=1e-6)

    def test_no_reference_for_ou(self):
        """Only bm_drift and gbm have exact lookback references."""
        with self.assertRaises(ModelError):
            LookbackReference(builtin("ou"), 1.0)

    def test_constant_coefficients_unbiased(self):
        """bm_drift: the bridge-corrected maximum is exact, so bias stays within 3 SE."""
        ctx = _context(model={"name": "bm_drift", "params": {"b": 0.3}},
                       grid={"N": [8, 16, 32]}, samples={"M": 4096},
                       lookback={"payoff": "lookback_floating"})
        report = run_lookback_bias(ctx)
        names = [c.name for c in report.checks]
        self.assertEqual(names, ["exact_scheme_unbiased"])
        self.assertTrue(report.passed)
        self.assertTrue(all(r.extra["reference"] == report.rows[0].extra["reference"]
                            for r in report.rows))


class TestMarginalRate(unittest.TestCase):
    """Deterministic law sweep on a coarse mesh."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_output_times(self):
        """Nodes and midpoints of every N, deduplicated."""
        np.testing.assert_allclose(output_times(1.0, [1, 2]), [0.25, 0.5, 0.75, 1.0])

    def test_constant_coefficients_below_tolerance(self):
        """bm_drift: sup W2 within the mesh tolerance at every N, laws dumped."""
        ctx = _context(model={"name": "bm_drift", "params": {"b": 0.3}},
                       grid={"N": [4, 8, 16]}, mesh={"nodes": 512})
        report = run_marginal_rate(ctx, dump_laws=self.tmp / "laws")
        checks = {c.name: c for c in report.checks}
        self.assertTrue(checks["below_mesh_tolerance"].passed)
        self.assertTrue(checks["wasserstein_monotone"].passed)
        self.assertTrue((self.tmp / "laws" / "euler_N4_t0.125000.csv").exists())
        self.assertTrue(any((self.tmp / "laws").glob("fp_t*.csv")))


class TestPathwiseRate(unittest.TestCase):
    """Coupled bridges against the synchronous scheme."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_constant_coefficients_reproduce_reference(self):
        """bm_drift: every gap at round-off; per-path summaries written per N."""
        ctx = _context(model={"name": "bm_drift", "params": {"b": 0.3}},
                       grid={"N": [16, 32, 64]}, samples={"M": 100}, bridge={"level": 1})
        report = run_pathwise_rate(ctx, out_dir=self.tmp)
        self.assertEqual([c.name for c in report.checks], ["constant_coefficient_gaps"])
        self.assertTrue(report.passed)
        self.assertIsNone(report.fit)
        lines = (self.tmp / "paths_N16.csv").read_text().splitlines()
        self.assertEqual(lines[0], ",".join(SUMMARY_HEADER))
        self.assertEqual(len(lines), 101)

    def test_ou_rows_and_flags(self):
        """ou: finite rows with the coarse factor, and the coupling deviation flagged."""
        ctx = _context(model={"name": "ou"}, grid={"N": [8, 16, 32]}, samples={"M": 100},
                       bridge={"level": 1})
        report = run_pathwise_rate(ctx)
        self.assertEqual([r.m for r in report.rows], [4, 7, 11])
        self.assertTrue(all(math.isfinite(r.estimate) and r.estimate > 0 for r in report.rows))
        self.assertTrue(all(r.extra["sync_error"] > 0 for r in report.rows))
        self.assertIn("dominance", [c.name for c in report.checks])
        self.assertIn(MARKOVIAN_COUPLING, report.provenance.deviations)


class TestVerify(unittest.TestCase):
    """Invariant checks on reduced settings."""

    def test_exact_checks(self):
        """Refinement, constant-α g, β round trip and hypotheses pass."""
        ctx = _context()
        for check in (check_refinement_consistency, check_g_constant_alpha,
                      check_beta_round_trip, check_hypotheses):
            result = check(ctx)
            self.assertTrue(result.passed, f"{result.name}: {result.measured} {result.detail}")

    def test_quantile_residual_halving(self):
        """Residual under 1e-3 and at least three times smaller on the halved discretisation."""
        result = check_quantile_residual(_context())
        self.assertTrue(result.passed, result.measured)
        self.assertGreaterEqual(result.measured["reduction"], 3.0)

    def test_lamperti_score_ou_and_gbm(self):
        """lamperti_mc agrees with the closed form within 3 SE for both models."""
        result = check_lamperti_score(_context(bridge={"mg": 1024}))
        self.assertTrue(result.passed, result.measured)
        self.assertIn("gbm_max_abs_diff", result.measured)
        self.assertIn("ou_max_abs_diff", result.measured)

    def test_bridge_reconstruction(self):
        """Bridged endpoints pass and the shuffled control is rejected."""
        result = check_bridge_reconstruction(_context(verify={"samples": 4000}))
        self.assertTrue(result.passed, result.measured)

    def test_beta_normality(self):
        """β from filled Euler bridges is N(0, Δ)."""
        result = check_beta_normality(_context(verify={"samples": 4000}))
        self.assertTrue(result.passed, result.measured)

    def test_law_preservation(self):
        """Ȳ_T follows the Euler law and χ̃ matches χ in law inside an interval."""
        ctx = _context(verify={"samples": 2048}, bridge={"level": 2}, mesh={"nodes": 1024})
        result = check_law_preservation(ctx)
        self.assertTrue(result.passed, result.measured)

    def test_suite_order_and_rows(self):
        """run_verify keeps check order; check_rows flattens measured values."""
        ctx = _context(workers=2)
        checks = [check_refinement_consistency, check_g_constant_alpha, check_ot_examples]
        report = run_verify(ctx, checks)
        self.assertEqual([c.name for c in report.checks],
                         ["brownian_refinement", "g_constant_alpha", "ot_examples"])
        self.assertTrue(all(c.passed for c in report.checks))
        self.assertEqual(report.experiment, "verify")
        self.assertTrue(all(len(row) == 4 for row in check_rows(report)))


class TestReports(unittest.TestCase):
    """CSV cells, tables and the report writer."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_format_cell(self):
        """17 significant digits for reals, integers and flags as integers."""
        self.assertEqual(format_cell(0.1), "0.10000000000000001")
        self.assertEqual(format_cell(np.int64(7)), "7")
        self.assertEqual(format_cell(True), "1")
        self.assertEqual(format_cell(math.nan), "nan")
        self.assertEqual(format_cell("x"), "x")

    def test_write_rows_is_reproducible(self):
        """Writing the same rows twice gives identical bytes."""
        rows = [(1, 0.5, "a"), (2, 1.0 / 3.0, "b")]
        a = write_rows(self.tmp / "a.csv", ("n", "v", "s"), rows).read_bytes()
        b = write_rows(self.tmp / "b.csv", ("n", "v", "s"), rows).read_bytes()
        self.assertEqual(a, b)
        self.assertEqual(a.decode().splitlines()[0], "n,v,s")

    def test_rate_table_and_writer(self):
        """Extra columns are sorted; report.json and rows.csv land in the out dir."""
        ctx = _context()
        report = RateReport(experiment="strong-rate", model="ou(kappa=1, sigma=1, x0=0)",
                            rows=[RateRow(N=8, estimate=0.1, std_error=0.01,
                                          extra={"z": 1.0, "a": 2.0})],
                            provenance=ctx.provenance())
        header, rows = rate_table(report)
        self.assertEqual(header, ["N", "m", "estimate", "std_error", "censored", "a", "z"])
        self.assertEqual(rows[0][-2:], [2.0, 1.0])
        path = ReportWriter(self.tmp).write_rate_report(report)
        with open(path, newline="", encoding="utf-8") as f:
            self.assertEqual(next(csv.reader(f)), header)
        self.assertTrue((self.tmp / "report.json").exists())

    def test_ot_check_report(self):
        """The OT oracle suite passes and emits one row per instance."""
        ctx = _context(verify={"ot_instances": 50})
        report, rows = run_ot_check(ctx)
        self.assertTrue(report.passed)
        self.assertEqual(len(rows), 50)
        self.assertTrue(check_ot_examples(ctx).passed)
        flat = check_rows(report)
        self.assertTrue(all(r[0] in ("ot_equivalence", "ot_examples") for r in flat))


if __name__ == "__main__":
    unittest.main()
