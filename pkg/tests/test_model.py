"""Tests for the model layer:
- Builtin diffusion models and parameter checks
- Numerical hypothesis validation
- Lamperti reduction
"""

import math
import unittest

import numpy as np

from errors import ModelError
from model.diffusion import DiffusionModel, builtin
from model.lamperti import lamperti
from model.validation import ProbeSpec, check_derivatives, probe_grid, validate_hypotheses


class TestBuiltinModels(unittest.TestCase):
    """Builtin models carry the coefficients and metadata they advertise."""

    def test_bm_drift_constant_coefficients(self):
        """bm_drift has σ ≡ 1 and ellipticity floor 1."""
        model = builtin("bm_drift", {"b": 0.1})
        x = np.linspace(-5.0, 5.0, 11)
        np.testing.assert_array_equal(model.s(x), np.ones_like(x))
        np.testing.assert_array_equal(model.b(x), np.full_like(x, 0.1))
        self.assertEqual(model.ellipticity_floor, 1.0)
        self.assertTrue(model.constant_coefficients)

    def test_sin_elliptic_bounds(self):
        """a(x) = 1 + sin(x)/2 stays in [0.5, 1.5]."""
        model = builtin("sin_elliptic")
        a = model.a(probe_grid(model, ProbeSpec(lo=-20.0, hi=20.0, points=4001)))
        self.assertGreaterEqual(a.min(), 0.5 - 1e-12)
        self.assertLessEqual(a.max(), 1.5 + 1e-12)
        self.assertIsNone(model.exact_law)

    def test_unknown_model_raises(self):
        """An unknown name lists the builtins."""
        with self.assertRaises(ModelError) as ctx:
            builtin("cir")
        self.assertIn("sin_elliptic", str(ctx.exception))

    def test_nonpositive_sigma_rejected(self):
        """σ must be positive."""
        with self.assertRaises(ModelError):
            builtin("gbm", {"sigma": 0.0})
        with self.assertRaises(ModelError):
            builtin("ou", {"kappa": -1.0})

    def test_declared_derivatives_match_central_differences(self):
        """Every declared derivative agrees with a central difference to 1e-6."""
        for name in ("bm_drift", "ou", "gbm", "sin_elliptic"):
            model = builtin(name)
            results = check_derivatives(model, probe_grid(model, ProbeSpec(points=101)))
            self.assertTrue(results, name)
            failed = [r.name for r in results if not r.passed]
            self.assertEqual(failed, [], name)

    def test_ou_exact_moments(self):
        """ou(1, 1) from x = 1 over t = 1: mean e^{-1}, variance (1 − e^{-2})/2."""
        law = builtin("ou").exact_law
        self.assertAlmostEqual(float(law.mean(1.0, 1.0)), math.exp(-1.0), places=12)
        self.assertAlmostEqual(float(law.variance(1.0, 1.0)), (1 - math.exp(-2.0)) / 2,
                               places=12)

    def test_describe_includes_parameters(self):
        """describe() renders parameters sorted by name."""
        self.assertEqual(builtin("bm_drift", {"b": 0.3}).describe(),
                         "bm_drift(b=0.3, sigma=1, x0=0)")


class TestHypothesisValidation(unittest.TestCase):
    """validate_hypotheses on the probe grid."""

    def test_bm_drift_passes_hyp2(self):
        """Constant coefficients pass with a zero Lipschitz estimate."""
        report = validate_hypotheses(builtin("bm_drift", {"b": 0.1}), "hyp2")
        self.assertTrue(report.passed)
        self.assertAlmostEqual(report.lipschitz_constant, 0.0, places=12)

    def test_sin_elliptic_passes_hyp2(self):
        """sin_elliptic passes with ellipticity estimate at least 0.5."""
        report = validate_hypotheses(builtin("sin_elliptic"), "hyp2",
                                     ProbeSpec(lo=-10.0, hi=10.0, points=2001))
        self.assertTrue(report.passed, [c.name for c in report.failed()])
        self.assertGreaterEqual(report.ellipticity_estimate, 0.5 - 1e-12)

    def test_ou_flags_unbounded_drift(self):
        """Past the bound threshold the drift check flags the ou drift."""
        spec = ProbeSpec(lo=-20.0, hi=20.0, points=401, bound_threshold=10.0)
        report = validate_hypotheses(builtin("ou"), "hyp1", spec)
        self.assertFalse(report.passed)
        self.assertIn("unbounded drift suspected", report.flags)

    def test_degenerate_sigma_fails_with_witness(self):
        """σ(x) = x violates ellipticity at 0."""
        model = DiffusionModel(
            name="linear_sigma",
            drift=lambda x: np.zeros(np.shape(x)),
            sigma=lambda x: np.asarray(x, dtype=float),
            x0=0.5,
        )
        report = validate_hypotheses(model, "hyp2", ProbeSpec(lo=-1.0, hi=1.0, points=201))
        self.assertFalse(report.passed)
        failed = {c.name: c for c in report.failed()}
        self.assertIn("uniform_ellipticity", failed)
        self.assertAlmostEqual(failed["uniform_ellipticity"].witness, 0.0, places=12)

    def test_levels_are_cumulative(self):
        """A hyp2 report contains every lipschitz and hyp1 condition."""
        model = builtin("sin_elliptic")
        hyp1 = {c.name for c in validate_hypotheses(model, "hyp1").conditions}
        hyp2 = {c.name for c in validate_hypotheses(model, "hyp2").conditions}
        self.assertTrue(hyp1 <= hyp2)
        self.assertIn("bounded_a4", hyp2 - hyp1)

    def test_unknown_level_raises(self):
        """Only lipschitz, hyp1 and hyp2 exist."""
        with self.assertRaises(ValueError):
            validate_hypotheses(builtin("bm_drift"), "hyp3")


class TestLamperti(unittest.TestCase):
    """Lamperti transform φ, its inverse, and the transformed drift α."""

    def test_bm_drift_identity(self):
        """σ ≡ 1: φ is the identity and α ≡ b."""
        tr = lamperti(builtin("bm_drift", {"b": 0.1}))
        x = np.linspace(-3.0, 3.0, 25)
        np.testing.assert_allclose(tr.phi(x), x, atol=1e-10)
        np.testing.assert_allclose(tr.alpha(x), 0.1, atol=1e-10)

    def test_gbm_alpha_constant(self):
        """gbm: α = μ/σ − σ/2 everywhere."""
        mu, sigma = 0.05, 0.3
        tr = lamperti(builtin("gbm", {"mu": mu, "sigma": sigma}))
        y = tr.phi(np.geomspace(0.5, 2.0, 9))
        np.testing.assert_allclose(tr.alpha(y), mu / sigma - sigma / 2, atol=1e-8)
        np.testing.assert_allclose(tr.alpha1(y), 0.0, atol=1e-8)

    def test_round_trip(self):
        """φ⁻¹(φ(x)) = x within 1e-10 for every builtin."""
        for name in ("ou", "gbm", "sin_elliptic"):
            model = builtin(name)
            tr = lamperti(model)
            x = probe_grid(model, ProbeSpec(points=201, width=4.0))
            np.testing.assert_allclose(tr.phi_inverse(tr.phi(x)), x, atol=1e-10, err_msg=name)

    def test_alpha_formula(self):
        """α(φ(x)) = b(x)/σ(x) − σ′(x)/2 on sin_elliptic."""
        model = builtin("sin_elliptic")
        tr = lamperti(model)
        x = np.linspace(-4.0, 4.0, 41)
        expected = model.b(x) / model.s(x) - 0.5 * model.derivatives["sigma1"](x)
        np.testing.assert_allclose(tr.alpha(tr.phi(x)), expected, atol=1e-8)

    def test_anchor_maps_to_zero(self):
        """φ vanishes at the anchor."""
        tr = lamperti(builtin("gbm"))
        self.assertAlmostEqual(tr.phi(1.0), 0.0, places=14)


if __name__ == "__main__":
    unittest.main()
