import math
import os
import tempfile

import numpy as np
import scipy.sparse as sp
from django.test import SimpleTestCase, tag
from scipy.special import comb

from guerra.services import RateCurve
from mixtures.calculators import MixtureSpec
from mixtures.exceptions import InvariantViolation
from mixtures.sampling import HamiltonianTable, popcount, sample_couplings, sample_hamiltonian

from .bounds import (
    DifficultyReport, barrier_factor, cheeger_bound, cheeger_bound_check, coercive_lower_bound,
    difficulty, overlap_lipschitz, spectral_report, testfn_bound,
)
from .kernels import ChainKernel, build_metropolis, build_replicated, lazy, spectral_gap
from .overlaps import (
    OverlapHistogram, average_overlap_distribution, overlap_distribution, overlap_lipschitz_constant,
)
from .sampler import geometric_schedule, mcmc_overlap, rate_consistency


def sk(beta, h=0.0):
    return MixtureSpec.from_beta(beta, ((2, 1.0),), h=h)


def flat_table(n_spins):
    return HamiltonianTable(n_spins, np.zeros(2 ** n_spins))


def binomial_law(n_spins):
    return np.array([comb(n_spins, k) for k in range(n_spins + 1)]) / 2.0 ** n_spins


class MetropolisKernelTests(SimpleTestCase):

    def test_flat_hamiltonian_is_simple_random_walk(self):
        kernel = build_metropolis(flat_table(4))
        dense = kernel.matrix.toarray()
        np.testing.assert_allclose(np.diag(dense), 0.0, atol=1e-15)
        np.testing.assert_allclose(dense[0, [1, 2, 4, 8]], 0.25)

    def test_invariants_on_random_instance(self):
        table = sample_hamiltonian(sk(1.5), 4, seed=1)
        kernel = build_metropolis(table)
        kernel.check_invariants()
        self.assertEqual(kernel.n_states, 16)
        np.testing.assert_allclose(kernel.stationary @ kernel.matrix.toarray(), kernel.stationary, atol=1e-14)

    def test_broken_rows_are_reported(self):
        matrix = sp.csr_matrix(np.array([[0.5, 0.4], [1.0, 0.0]]))
        kernel = ChainKernel(1, np.array([0.5, 0.5]), matrix)
        with self.assertRaises(InvariantViolation):
            kernel.check_invariants()

    def test_long_jumps_are_reported(self):
        pi = np.full(4, 0.25)
        matrix = sp.csr_matrix(np.array([
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ]))
        with self.assertRaises(InvariantViolation):
            ChainKernel(2, pi, matrix).check_invariants()

    def test_size_limit(self):
        with self.settings(SPINGLASS_SETTINGS={'N_MAX_TABLE': 3}):
            with self.assertRaises(ValueError):
                build_metropolis(flat_table(4))

    def test_triplet_export(self):
        kernel = build_metropolis(sample_hamiltonian(sk(1.0), 3, seed=2))
        with tempfile.TemporaryDirectory() as tmp:
            path = kernel.write_triplets(os.path.join(tmp, 'kernel.txt'))
            data = np.loadtxt(path)
        self.assertEqual(data.shape, (kernel.matrix.nnz, 3))
        sums = np.bincount(data[:, 0].astype(int), weights=data[:, 2], minlength=8)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


class SpectralGapTests(SimpleTestCase):

    def test_simple_random_walk(self):
        gap = spectral_gap(build_metropolis(flat_table(4)))
        self.assertAlmostEqual(gap.value, 0.5, places=10)
        self.assertEqual(gap.method, 'dense')

    def test_two_state_chain(self):
        h = 0.5
        # bit set means sigma = -1, so index 0 carries H = -h
        table = HamiltonianTable(1, np.array([-h, h]))
        gap = spectral_gap(build_metropolis(table))
        self.assertAlmostEqual(gap.value, 1.0 + math.exp(-2 * h), places=10)

    def test_lazy_chain_halves_the_gap(self):
        kernel = build_metropolis(sample_hamiltonian(sk(1.0), 4, seed=3))
        full = spectral_gap(kernel).value
        self.assertAlmostEqual(spectral_gap(lazy(kernel)).value, 0.5 * full, places=10)

    def test_iterative_agrees_with_dense(self):
        kernel = build_metropolis(sample_hamiltonian(sk(0.8), 5, seed=4))
        dense = spectral_gap(kernel, method='dense').value
        iterative = spectral_gap(kernel, method='iterative').value
        self.assertAlmostEqual(dense, iterative, places=7)

    def test_unknown_method(self):
        with self.assertRaises(ValueError):
            spectral_gap(build_metropolis(flat_table(2)), method='power')


class ReplicatedChainTests(SimpleTestCase):

    def test_flat_replicated_gap(self):
        kernel_r = build_replicated(build_metropolis(flat_table(4)))
        self.assertTrue(kernel_r.is_materialized)
        self.assertAlmostEqual(spectral_gap(kernel_r).value, 0.25, places=10)

    def test_replicated_gap_is_half(self):
        for seed, n in ((5, 3), (6, 4), (7, 5)):
            kernel = build_metropolis(sample_hamiltonian(sk(1.5), n, seed=seed))
            single = spectral_gap(kernel).value
            double = spectral_gap(build_replicated(kernel)).value
            self.assertLess(abs(double - 0.5 * single), 1e-8)

    def test_invariants(self):
        kernel_r = build_replicated(build_metropolis(sample_hamiltonian(sk(1.0), 3, seed=8)))
        kernel_r.check_invariants()
        np.testing.assert_allclose(kernel_r.stationary.sum(), 1.0)

    def test_operator_matches_materialized(self):
        kernel = build_metropolis(sample_hamiltonian(sk(1.0), 4, seed=9))
        full = build_replicated(kernel, materialize=True)
        free = build_replicated(kernel, materialize=False)
        self.assertFalse(free.is_materialized)
        vector = np.random.default_rng(0).normal(size=full.n_states)
        np.testing.assert_allclose(free.apply(vector), full.apply(vector), atol=1e-13)
        self.assertAlmostEqual(spectral_gap(free).value, spectral_gap(full).value, places=7)

    def test_replicated_twice(self):
        kernel_r = build_replicated(build_metropolis(flat_table(2)))
        with self.assertRaises(ValueError):
            build_replicated(kernel_r)


class OverlapDistributionTests(SimpleTestCase):

    def test_flat_hamiltonian_is_binomial(self):
        histogram = overlap_distribution(flat_table(6))
        np.testing.assert_allclose(histogram.probabilities, binomial_law(6), atol=1e-14)
        np.testing.assert_allclose(histogram.support, np.linspace(-1, 1, 7))

    def test_brute_force_double_sum(self):
        table = sample_hamiltonian(sk(1.2, h=0.3), 2, seed=10)
        pi = table.gibbs_weights()
        expected = np.zeros(3)
        for x in range(4):
            for y in range(4):
                expected[2 - popcount(np.array([x ^ y]))[0]] += pi[x] * pi[y]
        np.testing.assert_allclose(overlap_distribution(table).probabilities, expected, atol=1e-14)

    def test_total_mass(self):
        histogram = overlap_distribution(sample_hamiltonian(sk(2.0), 8, seed=11))
        self.assertAlmostEqual(histogram.total(), 1.0, places=10)
        self.assertTrue(np.all(histogram.probabilities >= 0.0))

    def test_ball_is_open(self):
        histogram = overlap_distribution(flat_table(2))
        mass, error = histogram.ball(0.0, 1.0)
        self.assertAlmostEqual(mass, 0.5)
        self.assertIsNone(error)

    def test_empirical_rate(self):
        histogram = overlap_distribution(flat_table(4))
        row = histogram.empirical_rate([1.0], 0.1)[0]
        self.assertAlmostEqual(row['rate'], math.log(16) / 4)

    def test_disorder_average(self):
        averaged = average_overlap_distribution(sk(0.5), 4, seeds=range(3))
        self.assertEqual(averaged.n_samples, 3)
        self.assertEqual(averaged.mode, 'disorder-average')
        self.assertAlmostEqual(averaged.total(), 1.0, places=10)
        self.assertEqual(averaged.stderr.shape, (5,))

    def test_size_limit(self):
        with self.settings(SPINGLASS_SETTINGS={'OVERLAP_EXACT_MAX_N': 3}):
            with self.assertRaises(ValueError):
                overlap_distribution(flat_table(4))

    def test_lipschitz_constant(self):
        for n in (2, 4, 5):
            self.assertAlmostEqual(overlap_lipschitz_constant(n), 2.0 / n)
            self.assertAlmostEqual(overlap_lipschitz(n), 2.0 / n)


class DifficultyTests(SimpleTestCase):

    def test_two_wells(self):
        report = difficulty([-1.0, 0.0, 1.0, 5.0], 0.2, lipschitz=1.0, weights=[0.4, 0.01, 0.4, 0.19])
        self.assertAlmostEqual(report.difficulty, math.log(16), places=10)
        self.assertTrue(report.is_difficult)
        lo, mid, hi = report.triple
        self.assertLess(abs(mid), 0.2)
        self.assertGreater(mid - lo, 4 * 0.2)
        self.assertGreater(hi - mid, 4 * 0.2)

    def test_binomial_is_not_difficult(self):
        report = difficulty(overlap_distribution(flat_table(10)), 0.25)
        self.assertAlmostEqual(report.lipschitz, 0.2)
        self.assertFalse(report.is_difficult)
        self.assertLessEqual(report.difficulty, 0.0)

    def test_no_admissible_triple(self):
        report = difficulty(overlap_distribution(flat_table(4)), 0.5)
        self.assertIsNone(report.triple)
        self.assertEqual(report.difficulty, -math.inf)
        self.assertFalse(report.is_difficult)

    def test_general_statistic_needs_lipschitz(self):
        with self.assertRaises(ValueError):
            difficulty([0.0, 1.0], 0.1, weights=[0.5, 0.5])
        with self.assertRaises(ValueError):
            difficulty(overlap_distribution(flat_table(2)), 0.0)


class CheegerBoundTests(SimpleTestCase):

    def report(self, value, epsilon=1.0, lipschitz=0.2):
        return DifficultyReport('overlap', epsilon, lipschitz, difficulty=value, phi_value=value)

    def test_value(self):
        bound, reason = cheeger_bound(self.report(math.log(16)))
        self.assertIsNone(reason)
        self.assertAlmostEqual(bound, 2 * 0.04 * (1 / 16) / 0.75)

    def test_log_four_is_rejected(self):
        bound, reason = cheeger_bound(self.report(math.log(4)))
        self.assertIsNone(bound)
        self.assertIn('log 4', reason)
        with self.assertRaises(ValueError):
            barrier_factor(math.log(4))

    def test_small_epsilon_is_rejected(self):
        bound, reason = cheeger_bound(self.report(5.0, epsilon=0.4))
        self.assertIsNone(bound)
        self.assertIn('2KD', reason)

    def test_decreasing_in_difficulty(self):
        values = [cheeger_bound(self.report(d))[0] for d in np.linspace(1.5, 20.0, 40)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))
        self.assertLess(values[-1], 1e-8)

    def test_bounds_dominate_exact_replicated_gap(self):
        for beta in (0.5, 1.5):
            for seed in range(3):
                table = sample_hamiltonian(sk(beta), 4, seed=seed)
                kernel_r = build_replicated(build_metropolis(table))
                histogram = overlap_distribution(table)
                report = difficulty(histogram, 1.25)
                entries = cheeger_bound_check(kernel_r, report, histogram)
                self.assertFalse(entries['cheeger_applicable'])
                if entries['testfn_bound'] is not None:
                    self.assertGreaterEqual(entries['testfn_bound'], entries['replicated_gap'])

    def test_testfn_bound_on_two_wells(self):
        histogram = OverlapHistogram(4, [0.45, 0.05, 0.0, 0.05, 0.45])
        value, level, width = testfn_bound(histogram)
        self.assertAlmostEqual(value, 0.5 * 0.1 / 0.21)
        self.assertAlmostEqual(level, 0.5)
        self.assertEqual(width, 1)
        self.assertEqual(testfn_bound(histogram, level=0.4), testfn_bound(histogram))
        self.assertIsNone(testfn_bound(histogram, level=-0.5))

    def test_single_chain_is_rejected(self):
        kernel = build_metropolis(flat_table(2))
        report = difficulty(overlap_distribution(flat_table(2)), 0.5)
        with self.assertRaises(ValueError):
            cheeger_bound_check(kernel, report)

    def test_violation_is_raised(self):
        kernel_r = build_replicated(build_metropolis(flat_table(4)))
        histogram = OverlapHistogram(4, [0.45, 0.05, 0.0, 0.05, 0.45])
        with self.assertRaises(InvariantViolation) as raised:
            cheeger_bound_check(kernel_r, difficulty(histogram, 1.0), histogram, gap=10.0)
        self.assertIn('testfn_bound', raised.exception.details)

    @tag('slow')
    def test_matrix_free_replicated_bounds(self):
        table = sample_hamiltonian(sk(1.5), 8, seed=13)
        report = spectral_report(table)
        self.assertLess(report.identity_error, 1e-7)


class CoerciveBoundTests(SimpleTestCase):

    def test_flat_hamiltonian_is_sharp(self):
        report = spectral_report(flat_table(5))
        self.assertAlmostEqual(report.coercive_lower, 0.4)
        self.assertAlmostEqual(report.lambda1, 0.4, places=10)
        self.assertAlmostEqual(report.Lambda1, 0.2, places=10)

    def test_dominated_by_exact_gap(self):
        for seed in range(4):
            table = sample_hamiltonian(sk(1.0), 6, seed=seed)
            kernel = build_metropolis(table)
            self.assertLessEqual(coercive_lower_bound(table, kernel), spectral_gap(kernel).value)

    def test_spectral_report(self):
        report = spectral_report(sample_hamiltonian(sk(1.5), 5, seed=14))
        self.assertLess(report.identity_error, 1e-8)
        self.assertGreater(report.lambda1, 0.0)
        self.assertLessEqual(report.lambda1, 2.0)
        self.assertIn('difficulty', report.as_dict())


class SamplerTests(SimpleTestCase):

    def test_schedule(self):
        schedule = geometric_schedule(5)
        self.assertAlmostEqual(schedule[-1], 1.0)
        self.assertTrue(np.all(np.diff(schedule) > 0))
        np.testing.assert_array_equal(geometric_schedule(1), [1.0])

    def test_flat_hamiltonian_matches_binomial(self):
        result = mcmc_overlap(MixtureSpec(), 8, n_sweeps=5000, seed=0, n_temps=2)
        exact = OverlapHistogram(8, binomial_law(8))
        self.assertLess(result.histogram.total_variation(exact), 0.05)
        self.assertTrue(result.mixing_ok)
        self.assertEqual(result.histogram.mode, 'mcmc')
        self.assertEqual(result.histogram.n_samples, 4500)

    def test_deterministic_given_seed(self):
        first = mcmc_overlap(sk(1.0), 6, n_sweeps=200, seed=3, n_temps=3)
        second = mcmc_overlap(sk(1.0), 6, n_sweeps=200, seed=3, n_temps=3)
        np.testing.assert_array_equal(first.histogram.probabilities, second.histogram.probabilities)

    def test_rejections(self):
        with self.assertRaises(ValueError):
            mcmc_overlap(sk(1.0), 201, n_sweeps=100, seed=0)
        with self.assertRaises(ValueError):
            mcmc_overlap(sk(1.0), 4, n_sweeps=100, seed=0, schedule=[0.5, 0.9])
        with self.assertRaises(ValueError):
            mcmc_overlap(sk(1.0), 4, n_sweeps=10, seed=0, batches=20)

    def test_rate_consistency(self):
        result = mcmc_overlap(MixtureSpec(), 8, n_sweeps=2000, seed=1, n_temps=2)
        curve = RateCurve([0.0, 0.5], [0.0, 10.0], [True, False], [0.0], [0.0, 0.0], 0.0, False)
        rows = rate_consistency(result, curve, 0.2)
        self.assertTrue(rows[0]['consistent'])
        self.assertFalse(rows[1]['consistent'])

    @tag('slow')
    def test_agrees_with_exact_law(self):
        couplings = sample_couplings(sk(1.0), 6, seed=4)
        exact = overlap_distribution(couplings.to_table())
        result = mcmc_overlap(sk(1.0), 6, n_sweeps=20000, seed=5, n_temps=4, couplings=couplings)
        self.assertLess(result.histogram.total_variation(exact), 0.05)
