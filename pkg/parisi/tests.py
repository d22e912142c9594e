import os
import tempfile

import numpy as np
from django.test import SimpleTestCase, tag

from mixtures.calculators import MixtureSpec
from mixtures.exceptions import ConvergenceError, GridError

from .local_fields import local_field_stats, replicon
from .measures import AtomicMeasure, measure_distance
from .solvers import GridParams, gauss_hermite, log_cosh, solve_fd, solve_recursion


def gaussian_expectation(func, order=200):
    nodes, weights = gauss_hermite(order)
    return float(np.dot(weights, func(nodes)))


class AtomicMeasureTests(SimpleTestCase):

    def test_cdf_is_right_continuous(self):
        nu = AtomicMeasure([0.2, 0.6], [0.25, 0.75])
        self.assertEqual(nu.cdf(0.1), 0.0)
        self.assertEqual(nu.cdf(0.2), 0.25)
        self.assertEqual(nu.cdf(0.59), 0.25)
        self.assertEqual(nu.cdf(0.6), 1.0)
        self.assertEqual(nu.cdf(1.0), 1.0)

    def test_pieces_cover_unit_interval(self):
        nu = AtomicMeasure([0.0, 0.5], [0.4, 0.6])
        self.assertEqual(nu.pieces(), [(0.0, 0.5, 0.4), (0.5, 1.0, 1.0)])

    def test_invalid_measures_rejected(self):
        with self.assertRaises(ValueError):
            AtomicMeasure([0.5, 0.2], [0.5, 0.5])
        with self.assertRaises(ValueError):
            AtomicMeasure([0.2, 0.5], [0.5, 0.6])
        with self.assertRaises(ValueError):
            AtomicMeasure([0.2, 1.2], [0.5, 0.5])
        with self.assertRaises(ValueError):
            AtomicMeasure([0.2, 0.5], [1.0, 0.0])

    def test_merge_and_atom_classification(self):
        nu = AtomicMeasure([0.3, 0.30005, 0.8], [0.4, 0.4, 0.2])
        merged = nu.merged(1e-4)
        self.assertEqual(merged.k, 2)
        self.assertAlmostEqual(merged.masses[0], 0.8)
        self.assertFalse(merged.is_atom(1e-3))
        self.assertTrue(AtomicMeasure([0.1, 0.5], [0.9995, 0.0005]).is_atom(1e-3))

    def test_from_unnormalized_combines_duplicates(self):
        nu = AtomicMeasure.from_unnormalized([0.5, 0.1, 0.5], [1.0, 2.0, 1.0])
        np.testing.assert_allclose(nu.atoms, [0.1, 0.5])
        np.testing.assert_allclose(nu.masses, [0.5, 0.5])

    def test_measure_distance(self):
        self.assertAlmostEqual(measure_distance(AtomicMeasure.delta(0.0), AtomicMeasure.delta(1.0)), 1.0)
        self.assertAlmostEqual(
            measure_distance(AtomicMeasure.delta(0.2), AtomicMeasure.delta(0.5)), 0.3,
        )


class RecursionSolverTests(SimpleTestCase):

    def test_delta_zero_closed_form(self):
        for terms in (((2, 1.0),), ((4, 1.0),), ((2, 1.0), (4, 1.0))):
            for h in (0.0, 0.5, 1.0):
                spec = MixtureSpec(terms=terms, h=h)
                sol = solve_recursion(spec, AtomicMeasure.delta(0.0))
                expected = float(log_cosh(h)) + spec.xi(1.0, 1) / 2
                self.assertAlmostEqual(sol.value(), expected, places=8)

    def test_delta_one_gaussian_average(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.5)
        sol = solve_recursion(spec, AtomicMeasure.delta(1.0))
        a = np.sqrt(spec.xi(1.0, 1))
        expected = gaussian_expectation(lambda z: log_cosh(0.5 + a * z))
        self.assertAlmostEqual(sol.value(), expected, places=7)

    def test_terminal_slice_is_log_cosh(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        sol = solve_recursion(spec, AtomicMeasure([0.3, 0.7], [0.5, 0.5]))
        np.testing.assert_array_equal(sol.phi[-1], log_cosh(sol.x_grid))

    def test_bounds_hold_on_random_measures(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            atoms = np.sort(rng.uniform(0, 1, 3))
            masses = rng.dirichlet(np.ones(3))
            spec = MixtureSpec(terms=((2, rng.uniform(0.5, 2.0)), (4, rng.uniform(0, 1))), h=rng.uniform(0, 1))
            sol = solve_recursion(spec, AtomicMeasure(atoms, masses), GridParams.coarse())
            sol.check_bounds()

    def test_centered_derivatives_agree_with_tilted(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.2)
        nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        tilted = solve_recursion(spec, nu, keep='knots')
        centered = solve_recursion(spec, nu, keep='knots', derivatives='centered')
        interior = np.abs(tilted.x_grid) < 6
        np.testing.assert_allclose(tilted.phi_x[0, interior], centered.phi_x[0, interior], atol=1e-4)
        np.testing.assert_allclose(tilted.phi_xx[0, interior], centered.phi_xx[0, interior], atol=1e-3)

    def test_monotone_in_measures(self):
        rng = np.random.default_rng(11)
        spec = MixtureSpec(terms=((2, 1.5), (3, 0.3)), h=0.4)
        for _ in range(6):
            atoms = np.sort(rng.uniform(0.05, 0.95, 2))
            masses = rng.dirichlet(np.ones(2))
            upper = AtomicMeasure(atoms, masses)
            # Moving atoms down raises the CDF pointwise
            lower_atoms = atoms * rng.uniform(0.3, 0.9)
            if lower_atoms[1] <= lower_atoms[0]:
                continue
            lower = AtomicMeasure(lower_atoms, masses)
            phi_small = solve_recursion(spec, upper, GridParams.coarse(), keep='knots').value()
            phi_large = solve_recursion(spec, lower, GridParams.coarse(), keep='knots').value()
            self.assertLessEqual(phi_small, phi_large + 1e-9)

    def test_boundary_influence_detected(self):
        spec = MixtureSpec(terms=((2, 25.0),))
        with self.assertRaises(GridError):
            solve_recursion(spec, AtomicMeasure.delta(1.0), GridParams.coarse(half_width=8.0))

    def test_grid_requirements(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=1.0)
        with self.assertRaises(GridError):
            solve_recursion(spec, AtomicMeasure.delta(0.0), GridParams.coarse(half_width=8.5))
        with self.assertRaises(ValueError):
            solve_recursion(spec, AtomicMeasure.delta(0.0), GridParams.coarse(quad_order=16))

    def test_slice_between_knots(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        nu = AtomicMeasure.delta(0.0)
        sol = solve_recursion(spec, nu, keep='knots')
        phi, phi_x, _ = sol.slice_at(0.37)
        expected = log_cosh(sol.x_grid) + (spec.xi(1.0, 1) - spec.xi(0.37, 1)) / 2
        interior = np.abs(sol.x_grid) < 8
        np.testing.assert_allclose(phi[interior], expected[interior], atol=1e-8)
        np.testing.assert_allclose(phi_x[interior], np.tanh(sol.x_grid[interior]), atol=1e-8)

    def test_write_grid(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        sol = solve_recursion(spec, AtomicMeasure.delta(0.5), GridParams.coarse(n_points=32), keep='knots')
        with tempfile.TemporaryDirectory() as directory:
            path = sol.write_grid(os.path.join(directory, 'grid.csv'))
            with open(path) as handle:
                lines = handle.read().splitlines()
        self.assertEqual(lines[0], '# method=recursion')
        self.assertEqual(lines[1], '# knots=0,0.5,1')
        self.assertEqual(lines[3], 't,x,phi,phi_x,phi_xx')
        self.assertEqual(len(lines), 4 + sol.time_knots.size * 32)


class FiniteDifferenceSolverTests(SimpleTestCase):

    def test_delta_zero_closed_form(self):
        for h in (0.0, 0.5, 1.0):
            spec = MixtureSpec(terms=((2, 1.0),), h=h)
            sol = solve_fd(spec, AtomicMeasure.delta(0.0), keep='knots')
            self.assertAlmostEqual(sol.value(), float(log_cosh(h)) + 1.0, delta=1e-4)

    def test_agrees_with_recursion(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        fd = solve_fd(spec, nu, keep='knots')
        rec = solve_recursion(spec, nu, keep='knots')
        interior = np.abs(fd.x_grid) < 8
        gap = np.abs(fd.phi[0] - rec.phi[0])[interior].max()
        self.assertLess(gap, 1e-4)
        fd.check_bounds()

    @tag('slow')
    def test_random_two_atomic_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            spec = MixtureSpec(terms=((2, rng.uniform(0.5, 2.0)),), h=rng.uniform(0, 0.5))
            nu = AtomicMeasure(np.sort(rng.uniform(0.05, 0.95, 2)), rng.dirichlet(np.ones(2)))
            fd = solve_fd(spec, nu, keep='knots')
            rec = solve_recursion(spec, nu, keep='knots')
            interior = np.abs(fd.x_grid) < 8
            self.assertLess(np.abs(fd.phi[0] - rec.phi[0])[interior].max(), 1e-4)

    def test_refinement_reduces_error(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        reference = solve_recursion(spec, nu, keep='knots')
        points = np.linspace(-4, 4, 33)
        coarse = GridParams.production(n_points=257, substeps=1)
        errors = []
        for grid in (coarse, coarse.refined()):
            fd = solve_fd(spec, nu, grid, keep='knots')
            phi_fd, _, _ = fd.evaluate(0.0, points)
            phi_ref, _, _ = reference.evaluate(0.0, points)
            errors.append(np.abs(phi_fd - phi_ref).max())
        self.assertLess(errors[1], errors[0] / 2)

    def test_unstable_step_rejected(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        with self.assertRaises(GridError):
            solve_fd(spec, AtomicMeasure.delta(0.0), GridParams.coarse(step_ratio=2.0))

    def test_step_halving_disagreement_raises(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        grid = GridParams.coarse(n_points=257)
        with self.assertRaises(ConvergenceError):
            solve_fd(spec, nu, grid, keep='knots', halving_tol=1e-14)
        with self.settings(SPINGLASS_SETTINGS={'FD_HALVING_TOL': 1e-14}):
            with self.assertRaises(ConvergenceError):
                solve_fd(spec, nu, grid, keep='knots')
        solve_fd(spec, nu, grid, keep='knots')

    def test_boundary_influence_detected(self):
        spec = MixtureSpec(terms=((2, 25.0),))
        with self.assertRaises(GridError):
            solve_fd(spec, AtomicMeasure.delta(1.0), GridParams.coarse(n_points=257, half_width=8.0))


class LocalFieldTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        cls.nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        cls.sol = solve_recursion(cls.spec, cls.nu)

    def test_start_is_exact(self):
        stats = local_field_stats(self.spec, self.nu, self.sol, 0.0, n_paths=1000, seed=0)
        _, phi_x, _ = self.sol.evaluate(0.0, self.spec.h)
        self.assertAlmostEqual(stats.e_phix_sq, float(phi_x) ** 2, places=12)
        self.assertEqual(stats.stderr('e_phix_sq'), 0.0)

    def test_zero_drift_matches_gaussian_quadrature(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        nu = AtomicMeasure.delta(1.0)
        sol = solve_recursion(spec, nu)
        q = 0.5
        b = np.sqrt(spec.xi(1.0, 1) - spec.xi(q, 1))
        s = np.sqrt(spec.xi(q, 1))
        nodes, weights = gauss_hermite(80)

        def phi_x(x):
            return np.tanh(x[..., None] + b * nodes) @ weights

        expected = gaussian_expectation(lambda z: phi_x(s * z) ** 2, order=80)
        exact = local_field_stats(spec, nu, sol, q, method='density_quadrature')
        self.assertAlmostEqual(exact.e_phix_sq, expected, places=6)
        mc = local_field_stats(spec, nu, sol, q, n_paths=20000, seed=3)
        self.assertLess(abs(mc.e_phix_sq - expected), 4 * mc.stderr('e_phix_sq') + 1e-3)

    def test_martingale_property(self):
        _, phi_x0, _ = self.sol.evaluate(0.0, self.spec.h)
        for q in (0.2, 0.5, 0.85):
            exact = local_field_stats(self.spec, self.nu, self.sol, q, method='density_quadrature')
            self.assertAlmostEqual(exact.e_phix, float(phi_x0), places=5)
        mc = local_field_stats(self.spec, self.nu, self.sol, 0.5, n_paths=20000, seed=9)
        self.assertLess(abs(mc.e_phix - float(phi_x0)), 3 * mc.stderr('e_phix') + 2e-3)

    def test_ito_identity(self):
        for t in (0.2, 0.5):
            delta = 1e-3
            plus = local_field_stats(self.spec, self.nu, self.sol, t + delta, method='density_quadrature')
            minus = local_field_stats(self.spec, self.nu, self.sol, t - delta, method='density_quadrature')
            mid = local_field_stats(self.spec, self.nu, self.sol, t, method='density_quadrature')
            derivative = (plus.e_phix_sq - minus.e_phix_sq) / (2 * delta)
            self.assertAlmostEqual(derivative, self.spec.xi(t, 2) * mid.e_phixx_sq, delta=1e-3)

    def test_stats_are_bounded(self):
        stats = local_field_stats(self.spec, self.nu, self.sol, 0.6, method='density_quadrature')
        self.assertTrue(0 <= stats.e_phix_sq < 1)
        self.assertTrue(0 <= stats.e_phixx_sq < 1)

    def test_input_validation(self):
        with self.assertRaises(ValueError):
            local_field_stats(self.spec, self.nu, self.sol, 0.5, n_paths=10, seed=0)
        with self.assertRaises(ValueError):
            local_field_stats(self.spec, self.nu, self.sol, 1.5, n_paths=1000, seed=0)
        with self.assertRaises(ValueError):
            local_field_stats(self.spec, AtomicMeasure.delta(0.0), self.sol, 0.5, n_paths=1000, seed=0)


class RepliconTests(SimpleTestCase):

    def test_sk_delta_zero_closed_form(self):
        beta = 0.6
        spec = MixtureSpec.from_beta(beta, [[2, 1.0]])
        nu = AtomicMeasure.delta(0.0)
        sol = solve_recursion(spec, nu)
        stats = local_field_stats(spec, nu, sol, 0.0, method='density_quadrature')
        self.assertAlmostEqual(replicon(spec, nu, sol, 0.0, stats), 1 - 2 * beta ** 2, places=8)

    def test_pure_four_spin_at_zero(self):
        spec = MixtureSpec.from_beta(2.0, [[4, 1.0]])
        nu = AtomicMeasure([0.0, 0.6], [0.5, 0.5])
        sol = solve_recursion(spec, nu, GridParams.coarse())
        stats = local_field_stats(spec, nu, sol, 0.0, method='density_quadrature')
        self.assertEqual(replicon(spec, nu, sol, 0.0, stats), 1.0)

    def test_lower_bound_from_phi_xx(self):
        spec = MixtureSpec(terms=((2, 1.0), (4, 0.5)), h=0.2)
        nu = AtomicMeasure([0.2, 0.6], [0.3, 0.7])
        sol = solve_recursion(spec, nu, GridParams.coarse())
        for q in (0.1, 0.4, 0.8):
            stats = local_field_stats(spec, nu, sol, q, method='density_quadrature')
            self.assertGreater(replicon(spec, nu, sol, q, stats), 1 - spec.xi(q, 2))

    def test_mismatched_stats_rejected(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        nu = AtomicMeasure.delta(0.0)
        sol = solve_recursion(spec, nu, GridParams.coarse())
        stats = local_field_stats(spec, nu, sol, 0.0, method='density_quadrature')
        with self.assertRaises(ValueError):
            replicon(spec, nu, sol, 0.5, stats)
