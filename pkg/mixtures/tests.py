from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from . import sampling
from .calculators import MixtureSpec, eval_xi, is_convex, xi_derivative_table
from .sampling import (
    CouplingTensors, covariance_check, index_from_spins, sample_couplings,
    sample_hamiltonian, spins_from_index, walsh_hadamard, walsh_level_variances,
)


class MixtureSpecTests(SimpleTestCase):

    def test_terms_are_sorted_and_zero_terms_dropped(self):
        spec = MixtureSpec(terms=((4, 1.0), (2, 0.5), (3, 0.0)))
        self.assertEqual(spec.terms, ((2, 0.5), (4, 1.0)))
        self.assertTrue(spec.is_even)

    def test_invalid_terms_rejected(self):
        with self.assertRaises(ValueError):
            MixtureSpec(terms=((2, -1.0),))
        with self.assertRaises(ValueError):
            MixtureSpec(terms=((2, 1.0), (2, 0.5)))
        with self.assertRaises(ValueError):
            MixtureSpec(terms=((0, 1.0),))
        with self.assertRaises(ValueError):
            MixtureSpec(terms=((2, 1.0),), h=-0.1)

    def test_odd_term_breaks_evenness(self):
        self.assertFalse(MixtureSpec(terms=((2, 1.0), (3, 0.1))).is_even)

    def test_from_beta_scales_base_mixture(self):
        spec = MixtureSpec.from_beta(2.0, [[2, 1.0], [4, 0.5]], h=0.1)
        self.assertEqual(spec.terms, ((2, 4.0), (4, 2.0)))
        self.assertAlmostEqual(spec.xi0(1.0), 1.5)
        self.assertAlmostEqual(spec.with_beta(1.0).xi(1.0), 1.5)

    def test_from_config_block(self):
        spec = MixtureSpec.from_config({'terms': [[2, 1.0]], 'h': 0.3})
        self.assertEqual(spec.terms, ((2, 1.0),))
        self.assertEqual(spec.h, 0.3)
        self.assertFalse(spec.has_beta)

    def test_with_beta_requires_decomposition(self):
        with self.assertRaises(ValueError):
            MixtureSpec(terms=((2, 1.0),)).with_beta(2.0)


class EvalXiTests(SimpleTestCase):

    def test_monomial_values(self):
        sk = MixtureSpec(terms=((2, 1.0),))
        self.assertAlmostEqual(eval_xi(sk, 0.5, 0), 0.25)
        self.assertAlmostEqual(eval_xi(sk, 1.0, 1), 2.0)
        mixed = MixtureSpec(terms=((2, 1.0), (4, 1.0)))
        self.assertAlmostEqual(eval_xi(mixed, 1.0, 2), 14.0)

    def test_domain_and_order_rejected(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        with self.assertRaises(ValueError):
            eval_xi(spec, 2.0, 0)
        with self.assertRaises(ValueError):
            eval_xi(spec, 0.5, 3)

    def test_derivative_matches_finite_differences(self):
        spec = MixtureSpec(terms=((2, 0.7), (3, 0.4), (5, 0.2)))
        t = 0.37
        errors = []
        for step in (1e-2, 5e-3, 2.5e-3):
            fd = (eval_xi(spec, t + step) - eval_xi(spec, t - step)) / (2 * step)
            errors.append(abs(fd - eval_xi(spec, t, 1)))
        # Centered differences are second order
        self.assertLess(errors[1], errors[0] / 3.5)
        self.assertLess(errors[2], errors[1] / 3.5)

    def test_vectorized_table(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        xi, d1, d2 = xi_derivative_table(spec, np.array([0.0, 0.5, 1.0]))
        np.testing.assert_allclose(xi, [0.0, 0.25, 1.0])
        np.testing.assert_allclose(d1, [0.0, 1.0, 2.0])
        np.testing.assert_allclose(d2, [2.0, 2.0, 2.0])


class ConvexityTests(SimpleTestCase):

    def test_even_monomial_is_convex(self):
        self.assertTrue(is_convex(MixtureSpec(terms=((2, 1.0),))))
        self.assertTrue(is_convex(MixtureSpec(terms=((4, 3.0),))))

    def test_pure_cubic_is_not_convex(self):
        self.assertFalse(is_convex(MixtureSpec(terms=((3, 1.0),))))

    def test_small_cubic_perturbation_stays_convex(self):
        self.assertTrue(is_convex(MixtureSpec(terms=((2, 1.0), (3, 0.01)))))

    def test_interior_minimum_detected(self):
        # xi'' = 12 t^2 + 6 t is negative at t = -1/4
        self.assertFalse(is_convex(MixtureSpec(terms=((3, 1.0), (4, 1.0)))))
        self.assertTrue(is_convex(MixtureSpec(terms=((2, 1.0), (3, 0.2), (4, 1.0)))))


class WalshHadamardTests(SimpleTestCase):

    def test_matches_explicit_character_sum(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(8)
        x = np.arange(8)
        signs = (-1.0) ** np.bitwise_count((x[:, None] & x[None, :]).astype(np.uint64))
        np.testing.assert_allclose(walsh_hadamard(values), signs @ values)

    def test_applied_twice_scales_by_length(self):
        values = np.arange(16, dtype=float)
        np.testing.assert_allclose(walsh_hadamard(walsh_hadamard(values)), 16 * values)

    def test_rejects_non_power_of_two(self):
        with self.assertRaises(ValueError):
            walsh_hadamard(np.ones(6))

    def test_level_variances_of_linear_mixture(self):
        spec = MixtureSpec(terms=((1, 0.5),))
        np.testing.assert_allclose(walsh_level_variances(spec, 4), [0, 0.5, 0, 0, 0], atol=1e-12)


class SampleHamiltonianTests(SimpleTestCase):

    def test_zero_mixture_gives_zero_table(self):
        table = sample_hamiltonian(MixtureSpec(), 3, seed=11)
        np.testing.assert_array_equal(table.values, np.zeros(8))

    def test_field_term_convention(self):
        table = sample_hamiltonian(MixtureSpec(h=0.5), 2, seed=0)
        # x = 0 is the all-plus configuration
        self.assertAlmostEqual(table.values[0], -1.0)
        self.assertAlmostEqual(table.values[3], 1.0)

    def test_deterministic_given_seed(self):
        spec = MixtureSpec(terms=((2, 1.0), (3, 0.5)))
        first = sample_hamiltonian(spec, 5, seed=42)
        second = sample_hamiltonian(spec, 5, seed=42)
        np.testing.assert_array_equal(first.values, second.values)

    @override_settings(SPINGLASS_SETTINGS={'N_MAX_TABLE': 4})
    def test_table_size_limit(self):
        with self.assertRaises(ValueError):
            sample_hamiltonian(MixtureSpec(terms=((2, 1.0),)), 5, seed=0)

    def test_even_mixture_table_is_flip_symmetric(self):
        spec = MixtureSpec(terms=((2, 1.0), (4, 0.5)))
        table = sample_hamiltonian(spec, 4, seed=3)
        # sigma -> -sigma maps x to 2^N - 1 - x
        np.testing.assert_allclose(table.values, table.values[::-1], atol=1e-12)

    def test_variance_of_sk_table(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        samples = np.array([sample_hamiltonian(spec, 2, seed=s).values for s in range(4000)])
        variance = samples.var(axis=0)
        stderr = 2.0 * np.sqrt(2.0 / 4000)
        np.testing.assert_allclose(variance, 2.0, atol=4 * stderr)

    def test_tensor_method_table(self):
        spec = MixtureSpec(terms=((2, 1.0),), h=0.2)
        table = sample_hamiltonian(spec, 3, seed=5, method='tensor')
        couplings = sample_couplings(spec, 3, seed=5)
        spins = spins_from_index(np.arange(8), 3)
        np.testing.assert_allclose(table.values, couplings.energy(spins))


class CovarianceCheckTests(SimpleTestCase):

    def test_sk_two_spins_passes(self):
        report = covariance_check(MixtureSpec(terms=((2, 1.0),)), 2, 100000, seed=1)
        self.assertTrue(report['passed'])

    def test_pure_four_spin_three_spins_passes(self):
        report = covariance_check(MixtureSpec(terms=((4, 1.0),)), 3, 100000, seed=2)
        self.assertTrue(report['passed'])

    def test_zero_mixture_has_no_deviation(self):
        report = covariance_check(MixtureSpec(), 2, 100, seed=3)
        self.assertEqual(report['max_deviation'], 0.0)
        self.assertTrue(report['passed'])

    def test_tensor_path_matches_covariance(self):
        spec = MixtureSpec(terms=((1, 0.3), (2, 1.0), (3, 0.5)))
        report = covariance_check(spec, 3, 50000, seed=4, method='tensor')
        self.assertTrue(report['passed'])

    def test_size_limit(self):
        with self.assertRaises(ValueError):
            covariance_check(MixtureSpec(terms=((2, 1.0),)), 7, 100, seed=0)

    def test_threshold_is_adjusted_for_the_number_of_pairs(self):
        spec = MixtureSpec(terms=((2, 1.0),))
        small = covariance_check(spec, 2, 1000, seed=5)
        large = covariance_check(spec, 5, 1000, seed=5)
        # 10 and 528 distinct pairs at the default family-wise level 1e-4
        self.assertAlmostEqual(small['z_threshold'], 4.4172, places=3)
        self.assertGreater(large['z_threshold'], small['z_threshold'])
        loose = covariance_check(spec, 2, 1000, seed=5, alpha=0.5)
        self.assertLess(loose['z_threshold'], small['z_threshold'])
        with self.assertRaises(ValueError):
            covariance_check(spec, 2, 1000, seed=5, alpha=0.0)

    def test_wrong_variance_is_rejected(self):
        doubled = MixtureSpec(terms=((2, 2.0),))
        original = sampling._random_walsh_part

        def wrong_sampler(spec, n_spins, rng, size=None):
            return original(doubled, n_spins, rng, size=size)

        with mock.patch('mixtures.sampling._random_walsh_part', side_effect=wrong_sampler):
            report = covariance_check(MixtureSpec(terms=((2, 1.0),)), 2, 20000, seed=6)
        self.assertFalse(report['passed'])
        self.assertGreater(report['max_z_score'], report['z_threshold'])


class CouplingTensorsTests(SimpleTestCase):

    def test_flip_delta_matches_energy_difference_fast_path(self):
        spec = MixtureSpec(terms=((1, 0.2), (2, 1.0)), h=0.3)
        couplings = sample_couplings(spec, 6, seed=8)
        self.assertTrue(couplings.supports_local_fields)
        spins = spins_from_index(np.array([0, 5, 37, 63]), 6)
        for i in range(6):
            flipped = spins.copy()
            flipped[:, i] *= -1
            expected = couplings.energy(flipped) - couplings.energy(spins)
            np.testing.assert_allclose(couplings.flip_delta(spins, i), expected, atol=1e-10)

    def test_flip_delta_general_degree(self):
        spec = MixtureSpec(terms=((2, 1.0), (3, 0.7)))
        couplings = sample_couplings(spec, 5, seed=9)
        self.assertFalse(couplings.supports_local_fields)
        spins = spins_from_index(np.array([3, 17]), 5)
        flipped = spins.copy()
        flipped[:, 2] *= -1
        np.testing.assert_allclose(
            couplings.flip_delta(spins, 2),
            couplings.energy(flipped) - couplings.energy(spins),
        )

    def test_site_deltas_match_single_site_deltas(self):
        for terms in (((1, 0.2), (2, 1.0)), ((2, 1.0), (3, 0.7))):
            couplings = sample_couplings(MixtureSpec(terms=terms, h=0.2), 5, seed=10)
            spins = spins_from_index(np.array([0, 6, 19, 31]), 5)
            sites = np.array([4, 0, 2, 2])
            expected = [couplings.flip_delta(spins[c:c + 1], sites[c])[0] for c in range(4)]
            np.testing.assert_allclose(couplings.site_deltas(spins, sites), expected, atol=1e-10)

    def test_energy_matches_explicit_sum(self):
        rng = np.random.default_rng(1)
        tensors = {2: rng.standard_normal((3, 3)), 3: rng.standard_normal((3, 3, 3))}
        couplings = CouplingTensors(3, tensors, h=0.1)
        sigma = np.array([1.0, -1.0, -1.0])
        expected = (
            np.einsum('ij,i,j->', tensors[2], sigma, sigma)
            + np.einsum('ijk,i,j,k->', tensors[3], sigma, sigma, sigma)
            - 0.1 * sigma.sum()
        )
        self.assertAlmostEqual(float(couplings.energy(sigma)), expected)

    def test_index_round_trip_of_spins(self):
        x = np.arange(32)
        np.testing.assert_array_equal(index_from_spins(spins_from_index(x, 5)), x)
