import unittest
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from noisy_quant.noise_theory import (
    SnapshotSpec,
    delta_closed_form,
    delta_terms,
    empirical_delta,
    expected_qe_closed_form,
    feasible_n_range,
    monte_carlo_expected_qe,
    reduction_threshold,
    snapshot_qe,
    sweep_grid,
    sweep_n,
    sweep_x,
)
from utils.exceptions import FeasibilityError, InvalidArgumentError


class TestClosedForms(unittest.TestCase):
    def test_snapshot_qe(self):
        self.assertEqual(snapshot_qe(0.25, 1.0), 0.5625)
        self.assertEqual(snapshot_qe(1.0, 1.0), 0.0)

    def test_known_values(self):
        self.assertAlmostEqual(delta_closed_form(0.4, 1.4, 1.0), -0.16 / 1.4 + 0.8 + 1.96 / 3 - 1.4)
        self.assertLess(delta_closed_form(0.4, 1.4, 1.0), -0.06)
        self.assertGreater(delta_closed_form(0.45, 1.4, 1.0), 0.008)

    def test_delta_is_expected_minus_snapshot(self):
        for b in (0.25, 0.5, 1.0, 1.5, 2.0):
            for x in np.linspace(0, b, 50):
                fractions = np.linspace(0.02, 1.0, 50)
                n = np.maximum(x + fractions * (2 * b - 2 * x), 1e-6)

                expected = expected_qe_closed_form(x, n, b) - snapshot_qe(x, b)
                delta = delta_closed_form(x, n, b)
                np.testing.assert_allclose(delta, expected, atol=1e-12)

                threshold = reduction_threshold(n, b)
                clear = np.abs(x - threshold) > 1e-9
                np.testing.assert_array_equal((delta < 0)[clear], (x < threshold)[clear])

    def test_scaling_covariance(self):
        for c in (0.1, 0.5, 3.0, 16.0):
            for x, n, b in ((0.1, 1.4, 1.0), (0.3, 0.45, 0.4), (0.0, 1.9, 1.0)):
                self.assertAlmostEqual(
                    delta_closed_form(c * x, c * n, c * b),
                    c**2 * delta_closed_form(x, n, b),
                    delta=1e-12 * max(1.0, c**2),
                )

    def test_threshold_distance(self):
        for b in (0.25, 1.0, 2.0):
            n = np.linspace(0.05, 2.0, 40) * b
            np.testing.assert_allclose(delta_closed_form(0.0, n, b), n**2 / 3 - n * b, atol=1e-12)
            self.assertTrue(np.all(delta_closed_form(0.0, n, b) < 0))

    def test_reduction_threshold_is_sign_change(self):
        b = 1.0
        for n in np.linspace(0.1, 1.4, 14) * b:
            threshold = reduction_threshold(n, b)

            self.assertLessEqual(delta_closed_form(threshold - 1e-9, n, b), 0.0)
            self.assertGreater(delta_closed_form(threshold + 1e-9, n, b), 0.0)

    def test_reduction_threshold_value(self):
        self.assertAlmostEqual(reduction_threshold(1.4, 1.0), 1.4 * (1 - np.sqrt(1.4 / 3)))
        self.assertEqual(reduction_threshold(3.0, 1.0), 0.0)

    def test_reduction_threshold_range(self):
        self.assertRaises(FeasibilityError, reduction_threshold, 3.5, 1.0)
        self.assertRaises(FeasibilityError, reduction_threshold, 0.0, 1.0)

    def test_feasible_n_range(self):
        self.assertEqual(feasible_n_range(0.25, 1.0), (0.25, 1.75))

    def test_infeasible_inputs(self):
        self.assertRaises(FeasibilityError, delta_closed_form, 0.1, 0.05, 1.0)
        self.assertRaises(FeasibilityError, delta_closed_form, 0.1, 1.95, 1.0)
        self.assertRaises(FeasibilityError, delta_closed_form, 2.0, 1.0, 1.0)
        self.assertRaises(FeasibilityError, expected_qe_closed_form, 0.5, 1.0, 0.0)

    def test_delta_terms_is_unchecked(self):
        self.assertAlmostEqual(delta_terms(0.1, 0.05, 1.0), -0.2 + 0.2 + 0.0025 / 3 - 0.05)


class TestMonteCarlo(unittest.TestCase):
    def setUp(self):
        generator = np.random.default_rng(2024)
        b = generator.uniform(0.25, 2.0, size=100)
        x = generator.uniform(0.0, 1.0, size=100) * b
        n = x + generator.uniform(0.05, 0.95, size=100) * (2 * b - 2 * x)
        self.triples = list(zip(x, n, b))

    def test_closed_form_matches_sampling(self):
        for idx, (x, n, b) in enumerate(self.triples):
            estimate = monte_carlo_expected_qe(x, n, b, seed=idx)
            tolerance = max(5e-3, 4 * estimate.standard_error)

            self.assertAlmostEqual(
                expected_qe_closed_form(x, n, b), estimate.mean, delta=tolerance
            )

    def test_linear_constant_term_is_rejected(self):
        mismatches = 0
        for idx, (x, n, b) in enumerate(self.triples):
            estimate = monte_carlo_expected_qe(x, n, b, seed=idx)
            linear = x**2 - (b / n) * x**2 + n / 3 - n * b + b**2
            tolerance = max(5e-3, 4 * estimate.standard_error)
            mismatches += abs(linear - estimate.mean) > tolerance

        self.assertGreater(mismatches, 0)

    def test_reproducible(self):
        first = monte_carlo_expected_qe(0.3, 1.0, 1.0, samples=1000, seed=3)
        second = monte_carlo_expected_qe(0.3, 1.0, 1.0, samples=1000, seed=3)
        self.assertEqual(first, second)

    def test_invalid_sample_count(self):
        self.assertRaises(InvalidArgumentError, monte_carlo_expected_qe, 0.3, 1.0, 1.0, 0)


class TestEmpiricalDelta(unittest.TestCase):
    def test_reproducible(self):
        spec = SnapshotSpec(x=0.1, b=1.0, n=1.4, seed=9)
        self.assertEqual(empirical_delta(spec), empirical_delta(spec))

    def test_close_to_closed_form(self):
        spec = SnapshotSpec(x=0.2, b=1.0, n=1.0, elements=20_000, instances=10)
        mean, std = empirical_delta(spec)

        self.assertAlmostEqual(mean, delta_closed_form(0.2, 1.0, 1.0), delta=0.02)
        self.assertGreaterEqual(std, 0.0)

    def test_million_elements(self):
        spec = SnapshotSpec(x=0.2, b=1.0, n=1.0, elements=1_000_000, instances=3)
        mean, _ = empirical_delta(spec)

        self.assertAlmostEqual(mean, delta_closed_form(0.2, 1.0, 1.0), delta=0.005)

    def test_validation(self):
        self.assertRaises(
            InvalidArgumentError, empirical_delta, SnapshotSpec(x=0.1, b=1.0, n=1.0, elements=0)
        )
        self.assertRaises(FeasibilityError, empirical_delta, SnapshotSpec(x=0.5, b=1.0, n=0.2))

    def test_snapshot_feasibility_flag(self):
        self.assertTrue(SnapshotSpec(x=0.6, b=1.0, n=1.4).feasible)
        self.assertFalse(SnapshotSpec(x=0.7, b=1.0, n=1.4).feasible)


class TestSweeps(unittest.TestCase):
    def test_sweep_grid(self):
        self.assertEqual(len(sweep_grid(0.1, 1.9, 0.1)), 19)
        self.assertEqual(len(sweep_grid(0.0, 0.6, 0.05)), 13)
        self.assertEqual(sweep_grid(0.0, 0.6, 0.05)[-1], 0.6)
        self.assertRaises(InvalidArgumentError, sweep_grid, 0.0, 1.0, 0.0)

    def test_sweep_n_tracks_closed_form(self):
        curve = sweep_n(0.1, 1.0, sweep_grid(0.1, 1.9, 0.1), SnapshotSpec(x=0.1, b=1.0, n=1.4))

        self.assertEqual(len(curve), 19)
        self.assertTrue(curve.feasible.all())
        np.testing.assert_allclose(curve.emp_mean, curve.closed_form, atol=0.15)

    def test_sweep_n_with_million_elements(self):
        spec = SnapshotSpec(x=0.1, b=1.0, n=1.4, elements=1_000_000, instances=1)
        curve = sweep_n(0.1, 1.0, sweep_grid(0.1, 1.9, 0.1), spec)

        np.testing.assert_allclose(curve.emp_mean, curve.closed_form, atol=0.01)

    def test_sweep_x_needs_feasible_noise(self):
        self.assertRaises(FeasibilityError, sweep_x, 5.0, 1.0, [0.0, 0.1])
        self.assertRaises(FeasibilityError, sweep_x, 0.0, 1.0, [0.0, 0.1])

    def test_sweep_x_sign_change(self):
        spec = SnapshotSpec(x=0.0, b=1.0, n=1.4, elements=5000, instances=10)
        curve = sweep_x(1.4, 1.0, sweep_grid(0.0, 0.6, 0.05), spec)

        self.assertEqual(len(curve), 13)
        crossing = curve.sign_change()
        self.assertIsNotNone(crossing)
        self.assertGreaterEqual(crossing, 0.40)
        self.assertLessEqual(crossing, 0.48)

    def test_infeasible_points_are_flagged(self):
        curve = sweep_n(0.5, 1.0, [0.2, 1.0, 1.8])

        np.testing.assert_array_equal(curve.feasible, [False, True, False])
        self.assertTrue(np.isnan(curve.closed_form[0]))
        self.assertTrue(np.isnan(curve.emp_mean[2]))
        self.assertFalse(np.isnan(curve.emp_mean[1]))

    def test_sign_change_absent(self):
        curve = sweep_x(1.4, 1.0, [0.0, 0.1, 0.2])
        self.assertIsNone(curve.sign_change())

    def test_to_csv(self):
        curve = sweep_n(0.1, 1.0, [0.5, 1.0])

        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "sweep_n.csv"
            curve.to_csv(path)
            frame = pd.read_csv(path)

        self.assertListEqual(
            list(frame.columns),
            ["sweep_value", "closed_form", "emp_mean", "emp_std", "feasible"],
        )
        self.assertEqual(len(frame), 2)

    def test_sweep_seeds_differ_per_point(self):
        curve = sweep_n(0.1, 1.0, [1.0, 1.0])
        self.assertNotEqual(curve.emp_mean[0], curve.emp_mean[1])
