"""Tests for the coupling layer:
- One-dimensional optimal transport and its brute-force check
- Coarse marginal coupling
- Euler-chain bridge fill
- β reconstruction, restarted Euler and path assembly
"""

import math
import unittest

import numpy as np

from bridge.score import BridgeScore
from coupling.assemble import (
    SUMMARY_HEADER, assemble_coupled_paths, reconstruct_beta, refine_beta, restarted_euler,
)
from coupling.fill import euler_bridge_fill, log_transition
from coupling.marginal import coarse_marginal_coupling
from coupling.transport import DiscreteMeasure, empirical_w1d, ot_bruteforce, quantile_cost
from errors import CouplingError, DomainExitError
from model.diffusion import builtin
from simulate.brownian import BrownianSource, Stream, block_generator, coarsen
from simulate.euler import GridSpec, euler_path, exact_path

SEED = 20240611


class TestOptimalTransport(unittest.TestCase):
    """Sorted matching against exact transport."""

    def test_three_point_example(self):
        """{0, 1, 3} vs {0, 2, 3}: W1 = 1/3 both ways."""
        a, b = [0.0, 1.0, 3.0], [0.0, 2.0, 3.0]
        self.assertAlmostEqual(empirical_w1d(a, b, p=1), 1.0 / 3.0, places=15)
        self.assertAlmostEqual(
            ot_bruteforce(DiscreteMeasure.uniform(a), DiscreteMeasure.uniform(b), p=1),
            1.0 / 3.0, places=15)

    def test_two_point_quadratic(self):
        """{0, 1} vs {0.5, 0.5}: W2 = 0.5."""
        self.assertAlmostEqual(empirical_w1d([0.0, 1.0], [0.5, 0.5], p=2), 0.5, places=15)

    def test_shift(self):
        """Translating every atom by c costs exactly |c|."""
        x = block_generator(SEED, Stream.CHECK, 10).standard_normal(500)
        for p in (1.0, 2.0, 3.0):
            self.assertAlmostEqual(empirical_w1d(x + 0.7, x, p=p), 0.7, places=12)

    def test_unsorted_input(self):
        """Input order does not matter."""
        self.assertEqual(empirical_w1d([3.0, 0.0, 1.0], [2.0, 3.0, 0.0]),
                         empirical_w1d([0.0, 1.0, 3.0], [0.0, 2.0, 3.0]))

    def test_bruteforce_agrees_with_sorted_matching(self):
        """Random uniform instances of 2 to 9 atoms agree within 1e-12 relative."""
        rng = block_generator(SEED, Stream.CHECK, 11)
        for n in range(2, 10):
            for p in (1.0, 2.0):
                x, y = rng.standard_normal(n), rng.standard_normal(n)
                exact = ot_bruteforce(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y), p)
                self.assertAlmostEqual(empirical_w1d(x, y, p), exact,
                                       delta=1e-12 * max(1.0, exact))

    def test_unequal_sizes(self):
        """Different sample counts match the transport program."""
        rng = block_generator(SEED, Stream.CHECK, 12)
        x, y = rng.standard_normal(4), rng.standard_normal(6)
        exact = ot_bruteforce(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y), p=2)
        self.assertAlmostEqual(empirical_w1d(x, y, p=2), exact, places=8)

    def test_weighted_measures(self):
        """Quantile cost equals the transport program for general weights."""
        mu = DiscreteMeasure(np.array([0.0, 1.0, 2.5]), np.array([0.2, 0.5, 0.3]))
        nu = DiscreteMeasure(np.array([-1.0, 0.5]), np.array([0.6, 0.4]))
        self.assertAlmostEqual(quantile_cost(mu, nu, p=1), ot_bruteforce(mu, nu, p=1), places=8)

    def test_invalid_inputs(self):
        """p below 1, bad weights and empty samples are refused."""
        with self.assertRaises(ValueError):
            empirical_w1d([0.0], [1.0], p=0.5)
        with self.assertRaises(ValueError):
            DiscreteMeasure(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
        with self.assertRaises(ValueError):
            empirical_w1d([], [1.0])

    def test_enumeration_limit(self):
        """Without the solver, large instances are refused."""
        mu = DiscreteMeasure.uniform(np.arange(10.0))
        with self.assertRaises(ValueError):
            ot_bruteforce(mu, mu, use_solver=False)


class TestCoarseCoupling(unittest.TestCase):
    """Euler chain coupled to the reference on the coarse grid."""

    def test_constant_coefficients_identity(self):
        """Equal conditional laws: the coupled values are the reference values."""
        model = builtin("bm_drift", {"b": 0.3})
        grid = GridSpec(T=1.0, N=16, m=4)
        inc = BrownianSource(SEED, 1.0, 16).block_increments(0, 0)
        X = exact_path(model, grid, inc)
        coupling = coarse_marginal_coupling(model, grid, X, None)
        np.testing.assert_array_equal(coupling.values, X.coarse_values())
        self.assertEqual(coupling.clipped, 0)

    def test_laws_required(self):
        """Non-constant coefficients need conditional tables."""
        model = builtin("sin_elliptic")
        grid = GridSpec(T=1.0, N=8, m=2)
        inc = BrownianSource(SEED, 1.0, 8).block_increments(0, 0)
        with self.assertRaises(ValueError):
            coarse_marginal_coupling(model, grid, euler_path(model, grid, inc), None)


class TestBridgeFill(unittest.TestCase):
    """Fine-grid Euler values conditioned on coarse values."""

    def test_single_step_intervals_unchanged(self):
        """m = 1: nothing to fill."""
        model = builtin("sin_elliptic")
        grid = GridSpec(T=1.0, N=4, m=1)
        coarse = np.array([[0.0, 0.2, -0.1, 0.3, 0.5]])
        result = euler_bridge_fill(model, grid, coarse, SEED)
        np.testing.assert_array_equal(result.values, coarse)
        self.assertEqual(result.failed, [])

    def test_endpoints_kept_and_interior_finite(self):
        """Coarse nodes are untouched; interior values are finite."""
        model = builtin("sin_elliptic")
        grid = GridSpec(T=1.0, N=16, m=4)
        rng = block_generator(SEED, Stream.CHECK, 20)
        coarse = np.cumsum(np.concatenate([np.zeros((32, 1)), 0.5 * rng.standard_normal((32, 4))],
                                          axis=1), axis=1)
        result = euler_bridge_fill(model, grid, coarse, SEED)
        np.testing.assert_array_equal(result.values[:, grid.coarse_indices], coarse)
        self.assertTrue(np.all(np.isfinite(result.values)))

    def test_brownian_chain_midpoint_variance(self):
        """σ ≡ 1, 0 → 0 over four steps: the middle value has variance Δ."""
        model = builtin("bm_drift")
        grid = GridSpec(T=1.0, N=4, m=4)
        rows = 10_000
        result = euler_bridge_fill(model, grid, np.zeros((rows, 2)), SEED)
        mid = result.values[:, 2]
        self.assertAlmostEqual(float(mid.mean()), 0.0, delta=4.0 * math.sqrt(grid.dt / rows))
        self.assertAlmostEqual(float(mid.var()), grid.dt, delta=0.05 * grid.dt)

    def test_fill_is_seeded(self):
        """Same seed and block give identical fills; another block differs."""
        model = builtin("ou")
        grid = GridSpec(T=1.0, N=8, m=4)
        coarse = np.array([[0.0, 0.4, -0.2]] * 4)
        a = euler_bridge_fill(model, grid, coarse, SEED, block=0).values
        b = euler_bridge_fill(model, grid, coarse, SEED, block=0).values
        c = euler_bridge_fill(model, grid, coarse, SEED, block=1).values
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_log_transition_is_gaussian(self):
        """One Euler step of bm_drift is N(x + bΔ, Δ)."""
        model = builtin("bm_drift", {"b": 0.3})
        value = float(log_transition(model, 0.0, 0.5, 0.25))
        d = 0.5 - 0.075
        self.assertAlmostEqual(value, -0.5 * d * d / 0.25 - 0.5 * math.log(2 * math.pi * 0.25),
                               places=14)


class TestAssembly(unittest.TestCase):
    """β, restarted Euler χ, bridged χ̃ and their sup gaps."""

    def test_beta_round_trip(self):
        """β recovered from an Euler path equals its driving increments."""
        model = builtin("sin_elliptic")
        grid = GridSpec(T=1.0, N=16)
        inc = BrownianSource(SEED, 1.0, 16).block_increments(1, 0)
        path = euler_path(model, grid, inc)
        np.testing.assert_allclose(reconstruct_beta(model, path.values, grid), inc, atol=1e-12)

    def test_beta_outside_domain(self):
        """A gbm value at or below zero cannot be inverted."""
        with self.assertRaises(DomainExitError):
            reconstruct_beta(builtin("gbm"), np.array([[1.0, -0.5, 1.0]]), GridSpec(T=1.0, N=2))

    def test_refined_beta_sums_back(self):
        """Refined β increments sum to the coarse β increments."""
        grid = GridSpec(T=1.0, N=8)
        beta = BrownianSource(SEED, 1.0, 8).block_increments(0, 0)
        fine = refine_beta(beta, grid, 3, SEED, 0)
        self.assertEqual(fine.shape, (beta.shape[0], 64))
        np.testing.assert_allclose(coarsen(fine, 8), beta, atol=1e-14)

    def test_restart_from_own_nodes(self):
        """Restarting at the Euler path's own coarse values reproduces the path."""
        model = builtin("ou")
        grid = GridSpec(T=1.0, N=16, m=4)
        inc = BrownianSource(SEED, 1.0, 16).block_increments(0, 0)
        path = euler_path(model, grid, inc)
        chi, left = restarted_euler(model, grid, inc, path.coarse_values())
        np.testing.assert_allclose(chi, path.values, atol=1e-13)
        np.testing.assert_allclose(left, path.values[:, grid.coarse_indices[1:]], atol=1e-13)

    def test_constant_coefficients_gaps(self):
        """bm_drift: coarse gap is zero; Ȳ matches χ and χ̃ matches X to rounding."""
        model = builtin("bm_drift", {"b": 0.3})
        grid = GridSpec(T=1.0, N=16, m=4)
        inc = BrownianSource(SEED, 1.0, 16).block_increments(0, 2)[:16]
        X = exact_path(model, grid, inc)
        paths = assemble_coupled_paths(model, grid, X, SEED, None, BridgeScore(model))
        np.testing.assert_array_equal(paths.max_coarse_gap, 0.0)
        self.assertLess(float(paths.sup_ybar_chi.max()), 1e-10)
        self.assertLess(float(paths.sup_x_chitilde.max()), 1e-10)
        np.testing.assert_array_equal(paths.chi_tilde[:, -1], paths.chi_left[:, -1])
        self.assertEqual(paths.chi.shape, (16, 65))
        rows = paths.summary_rows()
        self.assertEqual(len(rows), 16)
        self.assertEqual(len(rows[0]), len(SUMMARY_HEADER))

    def test_mismatched_reference_grid(self):
        """Reference paths on a different grid are rejected."""
        model = builtin("bm_drift")
        inc = BrownianSource(SEED, 1.0, 16).block_increments(0, 2)[:4]
        X = exact_path(model, GridSpec(T=1.0, N=16, m=4), inc)
        with self.assertRaises(CouplingError):
            assemble_coupled_paths(model, GridSpec(T=1.0, N=32, m=4), X, SEED, None,
                                   BridgeScore(model))


if __name__ == "__main__":
    unittest.main()
