import math

import numpy as np
from django.test import SimpleTestCase, tag
from scipy.integrate import quad
from scipy.optimize import brentq

from guerra.services import hessian_eigenpair, second_derivative_step
from mixtures.calculators import MixtureSpec
from parisi.measures import AtomicMeasure

from .calculators import (
    MeasureProfile, SphericalAnsatz, atom_criterion_pure_p, b_from_optimality, cs_functional,
    g_diagnostic, gt_value_sph, manifold_gap_bound, manifold_poincare_lower_bound, mixed_partial_sph,
    optimal_b, replicon_sph, sph_parisi,
)
from .services import (
    SphericalOptReport, barrier_search_sph, minimize_lambda_sph, minimize_spherical, rate_curve_sph,
    report_for_measure,
)


def sk(beta, h=0.0):
    return MixtureSpec.from_beta(beta, ((2, 1.0),), h=h)


def pure_four(beta):
    return MixtureSpec.from_beta(beta, ((4, 1.0),))


def hand_report(spec, mu):
    b = optimal_b(spec, mu)
    return SphericalOptReport(
        spec=spec, minimizer=mu, b=b, k_used=mu.k,
        ps_value=sph_parisi(spec, SphericalAnsatz(mu, b)), cs_value=cs_functional(spec, mu),
    )


def rs_overlap(spec):
    """Root of q = (xi'(q) + h^2)(1 - q)^2 on (0, 1)"""
    return brentq(lambda q: (spec.xi(q, 1) + spec.h ** 2) * (1 - q) ** 2 - q, 1e-12, 1 - 1e-12)


def integrate(func, lo, hi, breaks=(0.15, 0.5, 0.8), **kwargs):
    points = [p for p in breaks if lo < p < hi] or None
    return quad(func, lo, hi, points=points, **kwargs)[0]


def fast_options(**overrides):
    options = {'multi_starts': 3, 'maxiter': 200}
    options.update(overrides)
    return options


class MeasureProfileTests(SimpleTestCase):

    def setUp(self):
        self.spec = MixtureSpec(terms=((2, 0.6), (3, 0.3), (4, 0.5)), h=0.2)
        self.nu = AtomicMeasure([0.15, 0.5, 0.8], [0.3, 0.3, 0.4])
        self.profile = MeasureProfile(self.spec, self.nu)

    def test_psi_and_phi_match_quadrature(self):
        for t in (0.0, 0.1, 0.15, 0.33, 0.5, 0.9, 1.0):
            psi = integrate(lambda s: self.spec.xi(s, 2) * self.nu.cdf(s), t, 1.0)
            phi = integrate(lambda s: self.nu.cdf(s), t, 1.0)
            self.assertAlmostEqual(self.profile.psi(t), psi, places=10)
            self.assertAlmostEqual(self.profile.phi(t), phi, places=10)

    def test_phi_is_non_increasing_and_vanishes_at_one(self):
        values = [self.profile.phi(s) for s in np.linspace(0, 1, 101)]
        self.assertTrue(np.all(np.diff(values) <= 1e-15))
        self.assertEqual(self.profile.phi(1.0), 0.0)

    def test_shifted_integrals_match_quadrature(self):
        c = self.profile.psi(0.0) + 0.7
        for n in (1, 2, 3):
            for lo, hi in ((0.0, 1.0), (0.2, 0.6), (0.5, 1.0)):
                expected = integrate(
                    lambda t: self.spec.xi(t, 2) / (c - self.profile.psi(t)) ** n, lo, hi, epsabs=1e-13, epsrel=1e-13,
                )
                self.assertAlmostEqual(self.profile.shifted_integral(c, n, lo, hi), expected, places=9)

    def test_shifted_integral_inadmissible_shift(self):
        self.assertEqual(self.profile.shifted_integral(self.profile.psi(0.0) - 0.1, 2), math.inf)
        with self.assertRaises(ValueError):
            self.profile.shifted_integral(5.0, 4)

    def test_t_xi_integral(self):
        expected = integrate(lambda t: t * self.spec.xi(t, 2) * self.nu.cdf(t), 0.0, 1.0)
        self.assertAlmostEqual(self.profile.t_xi_integral(), expected, places=10)


class CrisantiSommersTests(SimpleTestCase):

    def test_delta_zero(self):
        for beta in (0.3, 0.7, 1.4):
            self.assertAlmostEqual(cs_functional(sk(beta), AtomicMeasure.delta(0.0)), beta ** 2 / 2, places=12)
        spec = MixtureSpec(terms=((2, 0.4), (5, 0.2)))
        self.assertAlmostEqual(cs_functional(spec, AtomicMeasure.delta(0.0)), spec.xi(1.0) / 2, places=12)

    def test_single_atom_closed_form(self):
        spec = MixtureSpec(terms=((2, 0.5), (4, 0.3)))
        for q in (0.1, 0.4, 0.75):
            expected = 0.5 * (spec.xi(1.0) - spec.xi(q) + q / (1 - q) + math.log(1 - q))
            self.assertAlmostEqual(cs_functional(spec, AtomicMeasure.delta(q)), expected, places=12)

    def test_field_adds_half_h_squared_times_phi_zero(self):
        for q in (0.0, 0.3, 0.6):
            nu = AtomicMeasure.delta(q)
            gap = cs_functional(sk(0.8, h=0.5), nu) - cs_functional(sk(0.8), nu)
            self.assertAlmostEqual(gap, 0.5 * 0.25 * (1 - q), places=12)

    def test_high_temperature_minimum_at_zero(self):
        spec = sk(0.6)
        at_zero = cs_functional(spec, AtomicMeasure.delta(0.0))
        for q in np.linspace(0.01, 0.95, 40):
            self.assertGreaterEqual(cs_functional(spec, AtomicMeasure.delta(q)), at_zero)

    def test_atom_at_one_rejected(self):
        with self.assertRaises(ValueError):
            cs_functional(sk(1.0), AtomicMeasure([0.2, 1.0], [0.5, 0.5]))


class SphericalParisiTests(SimpleTestCase):

    def test_replica_symmetric_b(self):
        spec = sk(0.5)
        b = optimal_b(spec, AtomicMeasure.delta(0.0))
        self.assertAlmostEqual(b, 1.5, places=10)
        self.assertAlmostEqual(b_from_optimality(spec, AtomicMeasure.delta(0.0)), 1.5, places=12)
        self.assertAlmostEqual(sph_parisi(spec, SphericalAnsatz(AtomicMeasure.delta(0.0), b)), 0.25, places=10)

    def test_single_atom_equals_twice_cs_at_optimal_b(self):
        spec = MixtureSpec(terms=((2, 0.7), (4, 0.4)), h=0.3)
        for q in (0.0, 0.2, 0.55, 0.8):
            nu = AtomicMeasure.delta(q)
            ansatz = SphericalAnsatz(nu, b_from_optimality(spec, nu))
            self.assertAlmostEqual(sph_parisi(spec, ansatz), 2 * cs_functional(spec, nu), places=10)

    def test_inadmissible_is_infinite(self):
        spec = sk(1.0, h=0.2)
        nu = AtomicMeasure([0.3, 0.7], [0.5, 0.5])
        psi0 = MeasureProfile(spec, nu).psi(0.0)
        self.assertEqual(sph_parisi(spec, SphericalAnsatz(nu, 0.9)), math.inf)
        self.assertEqual(sph_parisi(spec, SphericalAnsatz(nu, psi0 - 0.01)), math.inf)

    def test_pole_at_admissibility_boundary(self):
        spec = MixtureSpec(terms=((2, 2.0),), h=0.5)
        nu = AtomicMeasure.delta(0.0)
        psi0 = MeasureProfile(spec, nu).psi(0.0)
        values = [sph_parisi(spec, SphericalAnsatz(nu, psi0 + eps)) for eps in (1e-2, 1e-4, 1e-6)]
        self.assertTrue(values[0] < values[1] < values[2])
        self.assertGreater(values[2], 1e5)

    def test_optimal_b_is_a_minimum(self):
        spec = MixtureSpec(terms=((2, 0.5), (3, 0.2)), h=0.1)
        nu = AtomicMeasure([0.2, 0.6], [0.4, 0.6])
        b = optimal_b(spec, nu)
        value = sph_parisi(spec, SphericalAnsatz(nu, b))
        for delta in (1e-3, -1e-3, 0.1):
            self.assertGreater(sph_parisi(spec, SphericalAnsatz(nu, b + delta)), value)


class SphericalRepliconTests(SimpleTestCase):

    def test_delta_zero(self):
        for beta in (0.3, 0.9):
            self.assertAlmostEqual(replicon_sph(sk(beta), AtomicMeasure.delta(0.0), 0.0), 1 - 2 * beta ** 2, places=12)

    def test_pure_four_spin_at_zero_is_positive(self):
        nu = AtomicMeasure([0.0, 0.8], [0.4, 0.6])
        phi0 = MeasureProfile(pure_four(2.0), nu).phi(0.0)
        self.assertAlmostEqual(replicon_sph(pure_four(2.0), nu, 0.0), 1 / phi0 ** 2, places=12)

    def test_undefined_at_one(self):
        with self.assertRaises(ValueError):
            replicon_sph(sk(1.0), AtomicMeasure.delta(0.5), 1.0)


class AtomCriterionTests(SimpleTestCase):

    def test_low_temperature_is_single_atom(self):
        self.assertTrue(atom_criterion_pure_p(pure_four(0.1)))
        self.assertTrue(atom_criterion_pure_p(pure_four(1.0)))

    def test_violated_above_the_half_witness(self):
        threshold = math.sqrt(16 * (math.log(2) - 0.5))
        self.assertAlmostEqual(threshold, 1.758, places=3)
        for beta in (threshold + 1e-3, 2.0, 3.0):
            single, _, g_max = atom_criterion_pure_p(pure_four(beta), return_witness=True)
            self.assertFalse(single)
            self.assertGreater(g_max, 0.0)

    def test_requires_zero_field_and_beta(self):
        with self.assertRaises(ValueError):
            atom_criterion_pure_p(MixtureSpec.from_beta(1.0, ((4, 1.0),), h=0.1))
        with self.assertRaises(ValueError):
            atom_criterion_pure_p(MixtureSpec(terms=((4, 1.0),)))


class TwoReplicaFunctionalTests(SimpleTestCase):

    def setUp(self):
        self.spec = MixtureSpec(terms=((2, 0.5), (4, 0.4)), h=0.3)
        nu = AtomicMeasure([0.2, 0.6], [0.5, 0.5])
        self.ansatz = SphericalAnsatz(nu, optimal_b(self.spec, nu))

    def test_lambda_zero_equals_spherical_parisi(self):
        expected = sph_parisi(self.spec, self.ansatz)
        for q in np.linspace(0.0, 1.0, 11):
            self.assertAlmostEqual(gt_value_sph(self.spec, self.ansatz, 0.0, q).value, expected, places=10)

    def test_lambda_derivatives_match_finite_differences(self):
        delta = 1e-5
        for lam, q in ((0.0, 0.4), (0.2, 0.1), (-0.15, 0.7)):
            result = gt_value_sph(self.spec, self.ansatz, lam, q)
            up = gt_value_sph(self.spec, self.ansatz, lam + delta, q)
            down = gt_value_sph(self.spec, self.ansatz, lam - delta, q)
            self.assertAlmostEqual(result.d_lambda, (up.value - down.value) / (2 * delta), delta=1e-7)
            self.assertAlmostEqual(result.d2_lambda, (up.d_lambda - down.d_lambda) / (2 * delta), delta=1e-6)

    def test_mixed_partial_matches_finite_differences(self):
        delta = 1e-6
        for q in (0.1, 0.35, 0.8):
            up = gt_value_sph(self.spec, self.ansatz, 0.0, q + delta).d_lambda
            down = gt_value_sph(self.spec, self.ansatz, 0.0, q - delta).d_lambda
            self.assertAlmostEqual(mixed_partial_sph(self.spec, self.ansatz, q), (up - down) / (2 * delta), delta=1e-6)

    def test_even_in_lambda_at_zero_overlap(self):
        spec = MixtureSpec(terms=((2, 0.5), (4, 0.4)))
        nu = AtomicMeasure([0.2, 0.6], [0.5, 0.5])
        ansatz = SphericalAnsatz(nu, optimal_b(spec, nu))
        for lam in (0.05, 0.3):
            gap = gt_value_sph(spec, ansatz, lam, 0.0).value - gt_value_sph(spec, ansatz, -lam, 0.0).value
            self.assertLess(abs(gap), 1e-10)

    def test_stationary_at_replica_symmetric_overlap(self):
        spec = sk(0.5, h=0.5)
        q = rs_overlap(spec)
        nu = AtomicMeasure.delta(q)
        ansatz = SphericalAnsatz(nu, b_from_optimality(spec, nu))
        self.assertLess(abs(gt_value_sph(spec, ansatz, 0.0, q).d_lambda), 1e-10)
        lam_r = replicon_sph(spec, nu, q)
        phi = MeasureProfile(spec, nu).phi(q)
        self.assertAlmostEqual(mixed_partial_sph(spec, ansatz, q), -phi ** 2 * lam_r, places=10)

    def test_inadmissible_lambda_rejected(self):
        window = self.ansatz.b - self.ansatz.profile(self.spec).psi(0.0)
        with self.assertRaises(ValueError):
            gt_value_sph(self.spec, self.ansatz, window + 1e-3, 0.5)
        with self.assertRaises(ValueError):
            gt_value_sph(self.spec, self.ansatz, 0.0, 1.2)

    def test_lambda_minimum_is_stationary(self):
        optimum, n_eval = minimize_lambda_sph(self.spec, self.ansatz, 0.45)
        self.assertLess(abs(optimum.d_lambda), 1e-9)
        self.assertLessEqual(optimum.value, gt_value_sph(self.spec, self.ansatz, 0.0, 0.45).value)
        self.assertGreater(n_eval, 1)

    def test_lambda_search_from_a_start(self):
        base = gt_value_sph(self.spec, self.ansatz, 0.0, 0.45)
        step = second_derivative_step(base.d_lambda, 0.5 * base.d2_lambda)
        plain, plain_eval = minimize_lambda_sph(self.spec, self.ansatz, 0.45)
        seeded, seeded_eval = minimize_lambda_sph(self.spec, self.ansatz, 0.45, start=step)
        self.assertAlmostEqual(seeded.lam, plain.lam, places=8)
        self.assertEqual(seeded_eval, plain_eval)
        window = self.ansatz.b - self.ansatz.profile(self.spec).psi(0.0)
        outside, _ = minimize_lambda_sph(self.spec, self.ansatz, 0.45, start=10.0 * window)
        self.assertAlmostEqual(outside.lam, plain.lam, places=8)


class GDiagnosticTests(SimpleTestCase):

    def test_replica_symmetric_minimum_at_zero(self):
        spec = sk(0.5)
        nu = AtomicMeasure.delta(0.0)
        result = g_diagnostic(spec, SphericalAnsatz(nu, optimal_b(spec, nu)))
        self.assertTrue(result['passed'])
        self.assertEqual(result['grid_argmin'], 0.0)


class MinimizeSphericalTests(SimpleTestCase):

    def test_rejects_bad_k(self):
        for k in (0, 1.5):
            with self.assertRaises(ValueError):
                minimize_spherical(sk(0.5), k)

    def test_replica_symmetric_regime(self):
        report = minimize_spherical(sk(0.5), 2, fast_options())
        self.assertTrue(report.is_atom)
        self.assertEqual(report.k_eff, 1)
        self.assertLess(report.minimizer.atoms[0], 1e-4)
        self.assertAlmostEqual(report.b, 1.5, delta=1e-5)
        self.assertAlmostEqual(report.ps_value, 0.25, delta=1e-8)
        self.assertLess(report.consistency_error, 1e-6)
        self.assertLess(report.residuals['b_optimality'], 1e-5)
        self.assertGreater(report.residuals['margin_b_one'], 0.0)
        q, lam, alternative = report.atom_replicons[0]
        self.assertAlmostEqual(lam, alternative, delta=1e-6)

    def test_field_keeps_single_atom(self):
        spec = sk(0.5, h=0.5)
        report = minimize_spherical(spec, 1, fast_options())
        self.assertAlmostEqual(report.minimizer.atoms[0], rs_overlap(spec), delta=1e-6)
        self.assertLess(report.max_residual(), 1e-6)

    def test_report_serializes(self):
        payload = minimize_spherical(sk(0.5), 1, fast_options()).as_dict()
        self.assertIn('residuals', payload)
        self.assertIn('g_diagnostic', payload)
        self.assertTrue(payload['flags']['is_atom'])

    def test_agrees_with_single_atom_criterion(self):
        for beta in (0.8, 1.2):
            report = minimize_spherical(pure_four(beta), 2, fast_options(diagnostics=False))
            self.assertEqual(report.is_atom, atom_criterion_pure_p(pure_four(beta)))

    @tag('slow')
    def test_pure_four_spin_is_one_step(self):
        spec = pure_four(2.0)
        report = minimize_spherical(spec, 2)
        self.assertFalse(report.is_atom)
        self.assertEqual(report.k_eff, 2)
        self.assertLess(report.minimizer.atoms[0], 1e-4)
        self.assertGreater(report.minimizer.atoms[1], 0.1)
        self.assertLessEqual(max(report.residuals['q_optimality']), 1e-6)
        self.assertLessEqual(max(report.residuals['phi_psi']), 1e-6)
        self.assertLess(report.residuals['b_optimality'], 1e-5)
        self.assertGreater(report.residuals['margin_b_psi'], 0.0)
        self.assertGreater(report.residuals['margin_b_one'], 0.0)
        self.assertLess(report.consistency_error, 1e-6)
        self.assertFalse(atom_criterion_pure_p(spec))


class ReportForMeasureTests(SimpleTestCase):

    def test_matches_hand_built_report(self):
        spec = pure_four(2.0)
        mu = AtomicMeasure([0.0, 0.9], [0.6, 0.4])
        expected = hand_report(spec, mu)
        report = report_for_measure(spec, mu)
        self.assertEqual(report.b, expected.b)
        self.assertEqual(report.ps_value, expected.ps_value)
        self.assertEqual(report.cs_value, expected.cs_value)
        self.assertFalse(report.is_atom)
        self.assertEqual([row[0] for row in report.atom_replicons], [0.0, 0.9])
        self.assertIn('b_optimality', report.residuals)
        self.assertIsNone(report.g_diagnostic)
        self.assertIn('measure given, not optimized', report.notes)

    def test_single_atom_flag(self):
        report = report_for_measure(sk(0.5), AtomicMeasure.delta(0.0))
        self.assertTrue(report.is_atom)
        self.assertEqual(report.k_eff, 1)


class BarrierSearchSphericalTests(SimpleTestCase):

    def setUp(self):
        self.spec = pure_four(2.0)
        self.report = hand_report(self.spec, AtomicMeasure([0.0, 0.9], [0.6, 0.4]))

    def test_no_gap_at_the_atom(self):
        result = gt_value_sph(self.spec, self.report.ansatz, 0.0, 0.0)
        self.assertEqual(result.d_lambda, 0.0)

    def test_gap_found_near_inner_atom(self):
        result = barrier_search_sph(self.spec, self.report, 0.0, {'n_spins': 100})
        self.assertTrue(result.found)
        self.assertAlmostEqual(result.q, 0.01)
        self.assertGreater(result.lam, 0.0)
        self.assertGreater(result.gap, 1e-6)
        self.assertEqual(result.rate_constant, result.gap)
        self.assertEqual(
            result.predicted_gap_bound,
            manifold_gap_bound(0.1, result.epsilon, result.gap * 100),
        )
        self.assertIn('predicted_gap_bound', result.as_dict())

    def test_hessian_direction(self):
        result = barrier_search_sph(self.spec, self.report, 0.0)
        a = gt_value_sph(self.spec, self.report.ansatz, 0.0, 0.0).d2_lambda
        b = mixed_partial_sph(self.spec, self.report.ansatz, 0.0)
        self.assertAlmostEqual(b, -1.0, places=12)
        hessian = np.array([[a, b], [b, 0.0]])
        direction = np.array(result.direction)
        np.testing.assert_allclose(hessian @ direction, result.eigenvalue * direction, atol=1e-10)
        self.assertLess(result.eigenvalue, 0.0)
        self.assertEqual(hessian_eigenpair(a, b)[0], result.eigenvalue)

    def test_requires_atom_with_positive_replicon(self):
        with self.assertRaises(ValueError):
            barrier_search_sph(self.spec, self.report, 0.5)
        spec = sk(1.0)
        with self.assertRaises(ValueError):
            barrier_search_sph(spec, hand_report(spec, AtomicMeasure.delta(0.0)), 0.0)


class RateCurveSphericalTests(SimpleTestCase):

    def test_symmetric_curve_certifies_a_barrier(self):
        spec = pure_four(2.0)
        report = hand_report(spec, AtomicMeasure([0.0, 0.9], [0.6, 0.4]))
        curve = rate_curve_sph(spec, report, [-0.9, -0.45, 0.0, 0.45, 0.9])
        self.assertEqual(curve.zeros, [-0.9, 0.0, 0.9])
        self.assertEqual(curve.i_lb[1], curve.i_lb[3])
        self.assertTrue(all(value >= 0.0 for value in curve.i_lb))
        self.assertLess(curve.max_lambda_zero_error, 1e-10)
        self.assertEqual(curve.reference, report.ps_value)
        self.assertTrue(curve.gfeb)
        self.assertEqual(curve.certificate['q2'], -0.45)
        self.assertEqual((curve.certificate['q1'], curve.certificate['q3']), (-0.9, 0.0))
        self.assertAlmostEqual(curve.certificate['epsilon'], 0.09)

    def test_negative_overlaps_without_symmetry(self):
        spec = MixtureSpec(terms=((2, 0.5), (3, 0.3)))
        report = hand_report(spec, AtomicMeasure([0.1, 0.5], [0.5, 0.5]))
        curve = rate_curve_sph(spec, report, [-0.2, 0.3])
        self.assertEqual(curve.i_lb[0], 0.0)
        self.assertTrue(curve.notes)
        with self.assertRaises(ValueError):
            rate_curve_sph(spec, report, [1.5])


class ManifoldBoundTests(SimpleTestCase):

    def test_gap_bound_formula(self):
        expected = (2.0 / 0.5) ** 2 * math.exp(-5.0) / (1 - 4 * math.exp(-5.0))
        self.assertAlmostEqual(manifold_gap_bound(2.0, 0.5, 5.0), expected, places=14)
        self.assertEqual(manifold_gap_bound(1.0, 1.0, 1.0), math.inf)
        with self.assertRaises(ValueError):
            manifold_gap_bound(1.0, 0.0, 3.0)

    def test_poincare_lower_bound(self):
        self.assertAlmostEqual(manifold_poincare_lower_bound(10, 0.5), math.exp(-1.0) * 0.9, places=14)
        self.assertEqual(manifold_poincare_lower_bound(4, 0.0), 0.75)
        with self.assertRaises(ValueError):
            manifold_poincare_lower_bound(1, 0.0)
