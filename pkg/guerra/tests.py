from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase, tag

from mixtures.calculators import MixtureSpec
from parisi.local_fields import local_field_stats
from parisi.measures import AtomicMeasure
from parisi.solvers import GridParams, gauss_hermite, log_cosh, solve_recursion
from statics.calculators import ParisiCalculator

from .services import (
    barrier_search, curvature_profile, gt_value, hessian_eigenpair, minimize_lambda,
    rate_curve, second_derivative_step,
)
from .solvers import DegeneratePath, TiltedMeasure, grid_2d, solve_gt
from .terminal import terminal_data


def rs_fixed_point(beta, h, iterations=500):
    """q = E tanh^2(h + beta sqrt(2q) Z) for the SK mixture beta^2 t^2"""
    nodes, weights = gauss_hermite(200)
    q = 0.5
    for _ in range(iterations):
        q = float(np.dot(weights, np.tanh(h + beta * np.sqrt(2 * q) * nodes) ** 2))
    return q


def rs_replicon(beta, h, q):
    nodes, weights = gauss_hermite(200)
    sech4 = 1.0 / np.cosh(h + beta * np.sqrt(2 * q) * nodes) ** 4
    return 1.0 - 2 * beta ** 2 * float(np.dot(weights, sech4))


class TerminalDataTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = rng.normal(0, 2, 50)
        self.y = rng.normal(0, 2, 50)

    def test_lambda_zero_factorizes(self):
        value, d_lam, _ = terminal_data(0.0, self.x, self.y)
        np.testing.assert_allclose(value, log_cosh(self.x) + log_cosh(self.y), atol=1e-12)
        np.testing.assert_allclose(d_lam, np.tanh(self.x) * np.tanh(self.y), atol=1e-12)

    def test_origin(self):
        for lam in (-0.7, 0.3, 2.0):
            value, _, _ = terminal_data(lam, 0.0, 0.0)
            self.assertAlmostEqual(float(value), float(log_cosh(lam)), places=12)

    def test_lambda_derivatives_match_finite_differences(self):
        lam, delta = 0.4, 1e-5
        _, d_lam, d_lam2 = terminal_data(lam, self.x, self.y)
        up, d_up, _ = terminal_data(lam + delta, self.x, self.y)
        down, d_down, _ = terminal_data(lam - delta, self.x, self.y)
        np.testing.assert_allclose(d_lam, (up - down) / (2 * delta), atol=1e-8)
        np.testing.assert_allclose(d_lam2, (d_up - d_down) / (2 * delta), atol=1e-8)

    def test_large_arguments_stay_finite(self):
        value, d_lam, d_lam2 = terminal_data(0.5, np.array([400.0]), np.array([-300.0]))
        self.assertTrue(np.all(np.isfinite([value, d_lam, d_lam2])))


class DegeneratePathTests(SimpleTestCase):

    def test_endpoints(self):
        path = DegeneratePath(0.3)
        np.testing.assert_array_equal(path.overlap_matrix(0.0), np.zeros((2, 2)))
        np.testing.assert_allclose(path.overlap_matrix(1.0), [[1.0, 0.3], [0.3, 1.0]])

    def test_increments_are_positive_semidefinite(self):
        path = DegeneratePath(0.45)
        times = np.linspace(0.0, 1.0, 41)
        for lo, hi in zip(times[:-1], times[1:]):
            step = path.overlap_matrix(hi) - path.overlap_matrix(lo)
            self.assertGreaterEqual(np.linalg.eigvalsh(step).min(), -1e-12)

    def test_diffusion_matrix(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        path = DegeneratePath(0.5)
        np.testing.assert_allclose(path.diffusion_matrix(spec, 0.2), 2.0 * np.ones((2, 2)))
        np.testing.assert_allclose(path.diffusion_matrix(spec, 0.7), 2.0 * np.eye(2))

    def test_rejects_q_outside_unit_interval(self):
        with self.assertRaises(ValueError):
            DegeneratePath(-0.1)


class TiltedMeasureTests(SimpleTestCase):

    def setUp(self):
        self.nu = TiltedMeasure(AtomicMeasure([0.2, 0.6], [0.5, 0.5]), 0.4)

    def test_cdf_halved_before_q(self):
        self.assertEqual(self.nu.cdf(0.1), 0.0)
        self.assertEqual(self.nu.cdf(0.3), 0.25)
        self.assertEqual(self.nu.cdf(0.4), 0.5)
        self.assertEqual(self.nu.cdf(1.0), 1.0)

    def test_pieces(self):
        self.assertEqual(self.nu.pieces(0.0, 0.4), [(0.0, 0.2, 0.0), (0.2, 0.4, 0.25)])
        self.assertEqual(self.nu.pieces(0.4, 1.0), [(0.4, 0.6, 0.5), (0.6, 1.0, 1.0)])


class EigenpairTests(SimpleTestCase):

    def test_unit_off_diagonal(self):
        eigenvalue, direction = hessian_eigenpair(0.0, 1.0)
        self.assertAlmostEqual(eigenvalue, -1.0)
        np.testing.assert_allclose(direction, [-1.0, 1.0])

    def test_is_an_eigenpair(self):
        rng = np.random.default_rng(0)
        for a, b in rng.normal(size=(10, 2)):
            eigenvalue, direction = hessian_eigenpair(a, b)
            hessian = np.array([[a, b], [b, 0.0]])
            np.testing.assert_allclose(hessian @ direction, eigenvalue * direction, atol=1e-12)
            self.assertLess(eigenvalue, 0.0)

    def test_negative_mixed_partial_points_into_first_quadrant(self):
        _, direction = hessian_eigenpair(0.8, -0.5)
        self.assertGreater(direction[0], 0.0)

    def test_degenerate_input_rejected(self):
        with self.assertRaises(ValueError):
            hessian_eigenpair(1.0, 0.0)

    def test_second_derivative_step(self):
        self.assertAlmostEqual(second_derivative_step(0.4, 2.0), -0.1)
        with self.assertRaises(ValueError):
            second_derivative_step(0.4, 0.0)


class LambdaZeroIdentityTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = MixtureSpec(terms=((2, 1.0),), h=0.2)
        cls.mu = AtomicMeasure([0.2, 0.6], [0.5, 0.5])
        cls.q = 0.4
        cls.grid = grid_2d(n_points=192)
        cls.solution = solve_gt(cls.spec, cls.mu, cls.q, 0.0, cls.grid)
        cls.one_d = solve_recursion(cls.spec, cls.mu)
        cls.x = cls.solution.x_grid
        cls.mask = np.abs(cls.x) <= 6.0

    def test_u_factorizes(self):
        for t in (self.q, 0.6):
            phi, _, _ = self.one_d.evaluate(t, self.x[self.mask])
            expected = phi[:, None] + phi[None, :]
            u = self.solution.u[self.solution.u_index(t)][np.ix_(self.mask, self.mask)]
            self.assertLessEqual(np.abs(u - expected).max(), 5e-4)

    def test_lambda_derivative_of_u_on_diagonal(self):
        _, phi_x, _ = self.one_d.evaluate(self.q, self.x[self.mask])
        _, u_lambda, _ = self.solution.diagonal(self.q)
        self.assertLessEqual(np.abs(u_lambda[self.mask] - phi_x ** 2).max(), 5e-4)

    def test_v_is_twice_phi(self):
        v0, _, _ = self.solution.v_at_start()
        self.assertAlmostEqual(v0, 2 * self.one_d.value(), delta=5e-4)

    def test_lambda_derivative_of_v_is_local_field_average(self):
        _, v_lambda, _ = self.solution.v_at_start()
        stats = local_field_stats(self.spec, self.mu, self.one_d, self.q, method='density_quadrature')
        self.assertAlmostEqual(v_lambda, stats.e_phix_sq, delta=1e-3)

    def test_functional_is_constant_on_lambda_zero_axis(self):
        expected = 2 * ParisiCalculator.value(self.spec, self.mu)
        for q in (0.0, 0.4, 0.8):
            self.assertAlmostEqual(gt_value(self.spec, self.mu, q, 0.0, self.grid).value, expected, delta=1e-3)

    def test_q_zero_takes_the_diagonal(self):
        solution = solve_gt(self.spec, self.mu, 0.0, 0.3, self.grid)
        np.testing.assert_array_equal(solution.v[0], np.diagonal(solution.u[solution.u_index(0.0)]))


class LambdaDerivativeTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = MixtureSpec(terms=((2, 1.0),), h=0.2)
        cls.mu = AtomicMeasure([0.2, 0.6], [0.5, 0.5])
        cls.grid = grid_2d(n_points=192)

    def test_match_finite_differences(self):
        lam, delta = 0.3, 1e-3
        center = gt_value(self.spec, self.mu, 0.4, lam, self.grid)
        up = gt_value(self.spec, self.mu, 0.4, lam + delta, self.grid)
        down = gt_value(self.spec, self.mu, 0.4, lam - delta, self.grid)
        self.assertAlmostEqual(center.d_lambda, (up.value - down.value) / (2 * delta), delta=1e-5)
        self.assertAlmostEqual(center.d2_lambda, (up.d_lambda - down.d_lambda) / (2 * delta), delta=1e-4)

    def test_curvature_positive_and_bounded(self):
        profile = curvature_profile(self.spec, self.mu, 0.4, self.grid)
        self.assertTrue(all(c > 0 for c in profile['curvatures']))
        self.assertTrue(profile['bounded'])

    @tag('slow')
    def test_grid_refinement_moves_value_within_tolerance(self):
        refined = replace(self.grid.refined(), max_step_std=self.grid.max_step_std / 2)
        for lam in (0.0, 0.3):
            coarse_value = gt_value(self.spec, self.mu, 0.4, lam, self.grid).value
            fine_value = gt_value(self.spec, self.mu, 0.4, lam, refined).value
            self.assertLessEqual(abs(coarse_value - fine_value), 4e-3)

    def test_rejects_unknown_method(self):
        with self.assertRaises(ValueError):
            minimize_lambda(self.spec, self.mu, 0.4, self.grid, method='simplex')

    @tag('slow')
    def test_newton_and_grid_agree(self):
        newton, _ = minimize_lambda(self.spec, self.mu, 0.3, self.grid, method='newton')
        scan, _ = minimize_lambda(self.spec, self.mu, 0.3, self.grid, method='grid')
        self.assertAlmostEqual(newton.value, scan.value, delta=1e-7)


class ReplicaSymmetricRateTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.beta, cls.h = 0.5, 0.5
        cls.spec = MixtureSpec.from_beta(cls.beta, ((2, 1.0),), h=cls.h)
        cls.q_star = rs_fixed_point(cls.beta, cls.h)
        cls.mu = AtomicMeasure.delta(cls.q_star)
        cls.grid = grid_2d(n_points=192)

    def test_critical_point_at_the_atom(self):
        value = gt_value(self.spec, self.mu, self.q_star, 0.0, self.grid)
        self.assertAlmostEqual(value.d_lambda, 0.0, delta=1e-3)

    def test_mixed_partial_is_minus_replicon(self):
        dq = 0.01
        up = gt_value(self.spec, self.mu, self.q_star + dq, 0.0, self.grid).d_lambda
        down = gt_value(self.spec, self.mu, self.q_star - dq, 0.0, self.grid).d_lambda
        expected = -rs_replicon(self.beta, self.h, self.q_star)
        self.assertAlmostEqual((up - down) / (2 * dq), expected, delta=1e-2)

    def test_rate_curve(self):
        q_grid = [-0.3, 0.0, self.q_star, min(self.q_star + 0.3, 1.0)]
        curve = rate_curve(self.spec, self.mu, q_grid, {'grid': self.grid, 'grid_1d': GridParams.coarse()})
        self.assertEqual(curve.is_zero, [False, False, True, False])
        self.assertLessEqual(curve.i_lb[2], 1e-5)
        self.assertTrue(all(value >= 0.0 for value in curve.i_lb))
        self.assertGreater(curve.i_lb[1], 1e-5)
        self.assertEqual(curve.i_lb[0], 0.0)
        self.assertTrue(curve.notes)
        self.assertFalse(curve.gfeb)
        self.assertIsNone(curve.certificate)

    def test_non_convex_mixture_rejected(self):
        spec = MixtureSpec(terms=((3, 1.0), (4, 1.0)))
        with self.assertRaises(ValueError):
            rate_curve(spec, self.mu, [0.1])


class BarrierSearchTests(SimpleTestCase):

    def setUp(self):
        self.spec = MixtureSpec.from_beta(2.0, ((4, 1.0),))
        self.mu = AtomicMeasure([0.0, 0.9], [0.6, 0.4])

    def test_q_star_must_be_an_atom(self):
        with self.assertRaises(ValueError):
            barrier_search(self.spec, self.mu, 0.5)

    def test_negative_replicon_rejected(self):
        spec = MixtureSpec.from_beta(2.0, ((2, 1.0),))
        with self.assertRaises(ValueError):
            barrier_search(spec, AtomicMeasure.delta(0.0), 0.0, {'grid_1d': GridParams.coarse()})

    @tag('slow')
    def test_gap_found_next_to_the_origin(self):
        result = barrier_search(self.spec, self.mu, 0.0, {
            'grid': grid_2d(n_points=192), 'grid_1d': GridParams.coarse(), 'offsets': (0.05,),
        })
        self.assertAlmostEqual(result.replicon, 1.0, places=8)
        self.assertTrue(result.found)
        self.assertAlmostEqual(result.q, 0.05)
        self.assertGreater(result.gap, 0.0)
        self.assertGreater(result.lam, 0.0)
        self.assertGreater(result.direction[0], 0.0)

    @tag('slow')
    def test_symmetric_rate_curve_certifies_a_barrier(self):
        curve = rate_curve(self.spec, self.mu, [-0.9, -0.1, 0.0, 0.1, 0.9], {
            'grid': grid_2d(n_points=192), 'grid_1d': GridParams.coarse(),
        })
        self.assertEqual(curve.zeros, [-0.9, 0.0, 0.9])
        self.assertTrue(curve.gfeb)
        certificate = curve.certificate
        self.assertLess(certificate['q1'], certificate['q2'])
        self.assertLess(certificate['q2'], certificate['q3'])
        self.assertGreater(certificate['height'], 0.0)
        self.assertLess(certificate['epsilon'], 0.25 * min(
            certificate['q3'] - certificate['q2'], certificate['q2'] - certificate['q1'],
        ))
