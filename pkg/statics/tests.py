import numpy as np
from django.test import SimpleTestCase, tag
from scipy.integrate import quad

from mixtures.calculators import MixtureSpec
from parisi.measures import AtomicMeasure, measure_distance
from parisi.solvers import GridParams, gauss_hermite, log_cosh

from .calculators import ParisiCalculator
from .services import PhaseReport, check_gprev, minimize_krsb


def fast_options(**overrides):
    options = {
        'multi_starts': 3,
        'search_grid': GridParams.coarse(),
        'final_grid': GridParams.coarse(),
        'polish': False,
    }
    options.update(overrides)
    return options


class ParisiFunctionalTests(SimpleTestCase):

    def test_delta_zero_closed_form(self):
        for h in (0.0, 0.4):
            spec = MixtureSpec(terms=((2, 0.5), (4, 0.3)), h=h)
            value = ParisiCalculator.value(spec, AtomicMeasure.delta(0.0))
            self.assertAlmostEqual(value, float(log_cosh(h)) + spec.xi(1.0) / 2, delta=1e-5)

    def test_delta_one_has_no_correction(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.3)
        result = ParisiCalculator.parisi_functional(spec, AtomicMeasure.delta(1.0))
        self.assertEqual(result.correction, 0.0)
        nodes, weights = gauss_hermite(200)
        expected = float(np.dot(weights, log_cosh(0.3 + np.sqrt(2.0) * nodes)))
        self.assertAlmostEqual(result.value, expected, delta=1e-5)

    def test_correction_matches_numerical_integral(self):
        spec = MixtureSpec(terms=((2, 0.7), (3, 0.4), (5, 0.2)))
        nu = AtomicMeasure([0.1, 0.45, 0.8], [0.2, 0.5, 0.3])
        expected, _ = quad(
            lambda s: 0.5 * spec.xi(s, 2) * s * nu.cdf(s), 0.0, 1.0, points=[0.1, 0.45, 0.8],
        )
        self.assertAlmostEqual(ParisiCalculator.correction(spec, nu), expected, places=10)

    def test_lipschitz_in_measure_distance(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.2)
        grid = GridParams.coarse()
        constant = 1.0 + 0.5 * (spec.xi(1.0, 1) - spec.xi(1.0))
        rng = np.random.default_rng(7)
        for _ in range(6):
            mu = AtomicMeasure.from_unnormalized(rng.uniform(0, 1, 2), rng.uniform(0.1, 1, 2))
            nu = AtomicMeasure.from_unnormalized(rng.uniform(0, 1, 3), rng.uniform(0.1, 1, 3))
            gap = abs(ParisiCalculator.value(spec, mu, grid) - ParisiCalculator.value(spec, nu, grid))
            self.assertLessEqual(gap, constant * measure_distance(mu, nu) + 1e-6)


class BetaDerivativeTests(SimpleTestCase):

    def setUp(self):
        self.spec = MixtureSpec.from_beta(1.0, ((2, 1.0),))

    def test_known_values(self):
        calc = ParisiCalculator.free_energy_beta_derivative
        self.assertAlmostEqual(calc(self.spec, AtomicMeasure.delta(0.0)), 1.0)
        self.assertAlmostEqual(calc(self.spec, AtomicMeasure.delta(1.0)), 0.0)
        self.assertAlmostEqual(calc(self.spec, AtomicMeasure([0.0, 0.5], [0.5, 0.5])), 0.875)

    def test_scales_with_beta(self):
        spec = self.spec.with_beta(2.0)
        value = ParisiCalculator.free_energy_beta_derivative(spec, AtomicMeasure.delta(0.0))
        self.assertAlmostEqual(value, 2.0)

    def test_requires_beta(self):
        with self.assertRaises(ValueError):
            ParisiCalculator.free_energy_beta_derivative(
                MixtureSpec(terms=((2, 1.0),)), AtomicMeasure.delta(0.0),
            )


class SingleAtomScanTests(SimpleTestCase):

    def test_high_temperature_scan_minimized_at_zero(self):
        spec = MixtureSpec.from_beta(0.1, ((2, 1.0),))
        q_grid = np.linspace(0.0, 1.0, 11)
        values = ParisiCalculator.scan_single_atoms(spec, q_grid)
        self.assertEqual(int(np.argmin(values)), 0)
        self.assertTrue(np.all(np.diff(values) > 0))

    def test_best_single_atom_refines_the_scan(self):
        spec = MixtureSpec.from_beta(0.1, ((2, 1.0),))
        q, value = ParisiCalculator.best_single_atom(spec)
        self.assertLess(q, 0.05)
        self.assertLessEqual(value, ParisiCalculator.value(spec, AtomicMeasure.delta(0.1), GridParams.coarse()))


class MinimizeKrsbTests(SimpleTestCase):

    def test_rejects_bad_k(self):
        spec = MixtureSpec.from_beta(0.1, ((2, 1.0),))
        for k in (0, -1, 1.5):
            with self.assertRaises(ValueError):
                minimize_krsb(spec, k, fast_options())

    def test_high_temperature_collapses_to_single_atom(self):
        beta = 0.05
        spec = MixtureSpec.from_beta(beta, ((2, 1.0),))
        report = minimize_krsb(spec, 2, fast_options())
        self.assertTrue(report.is_atom)
        self.assertFalse(report.grsb)
        self.assertEqual(report.k_eff, 1)
        self.assertLess(report.minimizer.atoms[0], 0.05)
        q, lam = report.atom_replicons[0]
        self.assertAlmostEqual(lam, 1.0 - 2 * beta ** 2, delta=1e-3)
        self.assertTrue(report.gprev)
        self.assertEqual(report.gprev_witness, q)

    def test_no_worse_than_scanned_single_atoms(self):
        spec = MixtureSpec.from_beta(0.1, ((2, 1.0),), h=0.2)
        report = minimize_krsb(spec, 1, fast_options(diagnostics=False))
        grid = GridParams.coarse()
        for q in np.linspace(0.0, 1.0, 11):
            self.assertLessEqual(
                report.free_energy, ParisiCalculator.value(spec, AtomicMeasure.delta(q), grid) + 1e-12,
            )
        self.assertEqual(report.atom_replicons, [])
        self.assertFalse(report.gprev)

    def test_report_serializes(self):
        spec = MixtureSpec.from_beta(0.1, ((2, 1.0),))
        report = minimize_krsb(spec, 1, fast_options())
        payload = report.as_dict()
        self.assertEqual(payload['k_used'], 1)
        self.assertIn('gprev', payload['flags'])
        self.assertAlmostEqual(payload['beta_derivative'], report.beta_derivative)
        self.assertEqual(len(payload['start_values']), 3)

    @tag('slow')
    def test_increasing_k_never_increases_the_minimum(self):
        spec = MixtureSpec.from_beta(1.5, ((2, 1.0),))
        one = minimize_krsb(spec, 1, fast_options(diagnostics=False, multi_starts=4))
        two = minimize_krsb(spec, 2, fast_options(diagnostics=False, multi_starts=4))
        self.assertLessEqual(two.free_energy, one.free_energy + 1e-6)

    @tag('slow')
    def test_pure_four_spin_breaks_replica_symmetry(self):
        spec = MixtureSpec.from_beta(2.0, ((4, 1.0),))
        one = minimize_krsb(spec, 1, fast_options(diagnostics=False))
        two = minimize_krsb(spec, 2, fast_options(multi_starts=6))
        self.assertLess(two.free_energy, one.free_energy - 1e-4)
        self.assertTrue(two.grsb)
        # xi''(0) = 0, so an atom at the origin has replicon exactly 1
        self.assertTrue(two.gprev)
        for residual in two.fixed_point_residuals:
            self.assertLess(residual, 1e-2)


class CheckGprevTests(SimpleTestCase):

    def test_empty_replicon_list_is_false(self):
        report = PhaseReport(spec=MixtureSpec(), minimizer=AtomicMeasure.delta(0.0), k_used=1, free_energy=0.0)
        self.assertEqual(check_gprev(report.spec, report), (False, None))

    def test_picks_largest_positive_replicon(self):
        report = PhaseReport(
            spec=MixtureSpec(terms=((2, 1.0),)), minimizer=AtomicMeasure([0.1, 0.6], [0.5, 0.5]),
            k_used=2, free_energy=0.0, atom_replicons=[(0.1, 0.2), (0.6, 0.5)],
        )
        self.assertEqual(check_gprev(report.spec, report), (True, 0.6))

    def test_replicons_below_tolerance_do_not_count(self):
        report = PhaseReport(
            spec=MixtureSpec(terms=((2, 1.0),)), minimizer=AtomicMeasure.delta(0.3),
            k_used=1, free_energy=0.0, atom_replicons=[(0.3, 5e-4)],
        )
        self.assertEqual(check_gprev(report.spec, report), (False, None))
