"""
Finite-N realizations of the mixed p-spin Hamiltonian
Spin configurations are integers x in [0, 2^N); bit i of x set means sigma_i = -1.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb
from scipy.stats import norm

from .conf import get_setting

logger = logging.getLogger(__name__)

TENSOR_MAX_ENTRIES = 2 ** 24
SAMPLING_METHODS = ('walsh', 'tensor')


def popcount(x):
    """Number of set bits, elementwise"""
    return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)


def spins_from_index(x, n_spins):
    """Map configuration indices to +/-1 spin arrays of shape (..., N)"""
    x = np.asarray(x, dtype=np.int64)
    bits = (x[..., None] >> np.arange(n_spins)) & 1
    return (1 - 2 * bits).astype(float)


def index_from_spins(spins):
    spins = np.asarray(spins)
    bits = (spins < 0).astype(np.int64)
    return (bits << np.arange(spins.shape[-1])).sum(axis=-1)


def walsh_hadamard(values):
    """
    Unnormalized fast Walsh-Hadamard transform along the last axis.

    out[x] = sum_S values[S] * (-1)^popcount(x & S)
    """
    out = np.array(values, dtype=float, copy=True)
    n = out.shape[-1]
    if n == 0 or n & (n - 1):
        raise ValueError(f"Walsh-Hadamard length must be a power of two, got {n}")
    lead = out.shape[:-1]
    step = 1
    while step < n:
        view = out.reshape(*lead, n // (2 * step), 2, step)
        upper = view[..., 0, :].copy()
        view[..., 0, :] += view[..., 1, :]
        view[..., 1, :] = upper - view[..., 1, :]
        step *= 2
    return out


def field_term(h, n_spins):
    """Deterministic part -h * sum_i sigma_i on every configuration"""
    magnetization = n_spins - 2 * popcount(np.arange(2 ** n_spins))
    return -h * magnetization.astype(float)


def walsh_level_variances(spec, n_spins):
    """
    Variance of the Walsh coefficient of a set S with |S| = k, for k = 0..N.

    These are the Walsh coefficients of the radial covariance N*xi(1 - 2d/N),
    d the Hamming distance, obtained with Krawtchouk sums.
    """
    distances = np.arange(n_spins + 1)
    covariance = n_spins * np.atleast_1d(spec.xi(1.0 - 2.0 * distances / n_spins))
    variances = np.zeros(n_spins + 1)
    for k in range(n_spins + 1):
        kraw = np.zeros(n_spins + 1)
        for d in distances:
            j = np.arange(0, min(k, d) + 1)
            kraw[d] = np.sum((-1.0) ** j * comb(k, j) * comb(n_spins - k, d - j))
        variances[k] = np.dot(covariance, kraw) / 2.0 ** n_spins
    # Round-off residue on levels that vanish exactly (odd levels of even mixtures)
    variances[variances < 1e-12 * max(1.0, variances.max())] = 0.0
    return variances


@dataclass
class HamiltonianTable:
    """Values of H_N on all 2^N configurations"""

    n_spins: int
    values: np.ndarray
    seed: int = None
    h: float = 0.0
    method: str = 'walsh'

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (2 ** self.n_spins,):
            raise ValueError(
                f"Hamiltonian table for N={self.n_spins} needs {2 ** self.n_spins} values, "
                f"got shape {self.values.shape}"
            )

    @property
    def n_states(self):
        return self.values.size

    @property
    def oscillation(self):
        return float(self.values.max() - self.values.min())

    def spins(self, x):
        return spins_from_index(x, self.n_spins)

    def gibbs_weights(self):
        """Normalized pi(x) proportional to exp(-H(x))"""
        shifted = -(self.values - self.values.min())
        weights = np.exp(shifted)
        return weights / weights.sum()


@dataclass
class CouplingTensors:
    """
    Dense i.i.d. coupling tensors J_p scaled by sqrt(coeff_p) N^((1-p)/2).

    H(sigma) = sum_p <J_p, sigma^(x p)> - h * sum_i sigma_i
    """

    n_spins: int
    tensors: dict
    h: float = 0.0
    seed: int = None
    _pair: np.ndarray = field(default=None, init=False, repr=False)
    _linear: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        n = self.n_spins
        if self.max_degree <= 2:
            pair = np.zeros((n, n))
            if 2 in self.tensors:
                pair = self.tensors[2] + self.tensors[2].T
                np.fill_diagonal(pair, 0.0)
            self._pair = pair
            self._linear = self.tensors.get(1, np.zeros(n)).copy()

    @property
    def max_degree(self):
        return max(self.tensors, default=0)

    @property
    def supports_local_fields(self):
        return self.max_degree <= 2

    def constant(self):
        """Contribution of the diagonal of J_2, which does not depend on sigma"""
        if 2 in self.tensors:
            return float(np.trace(self.tensors[2]))
        return 0.0

    def energy(self, spins):
        """H for an array of configurations of shape (..., N)"""
        spins = np.asarray(spins, dtype=float)
        lead = spins.shape[:-1]
        flat = spins.reshape(-1, self.n_spins)
        total = -self.h * flat.sum(axis=1)
        for p, tensor in self.tensors.items():
            total = total + self._contract(tensor, p, flat)
        return total.reshape(lead)

    def _contract(self, tensor, p, flat):
        n = self.n_spins
        batch = max(1, 2 ** 22 // max(1, n ** (p - 1)))
        out = np.empty(flat.shape[0])
        for start in range(0, flat.shape[0], batch):
            block = flat[start:start + batch]
            acc = block @ tensor.reshape(n ** (p - 1), n).T
            for _ in range(p - 1):
                acc = acc.reshape(block.shape[0], -1, n)
                acc = np.einsum('bkn,bn->bk', acc, block)
            out[start:start + batch] = acc[:, 0]
        return out

    def local_fields(self, spins):
        """(J sigma)_i + g_i - h for p <= 2 mixtures, so dH(flip i) = -2 sigma_i * field_i"""
        if not self.supports_local_fields:
            raise ValueError("Local fields are only available for mixtures with p <= 2")
        spins = np.asarray(spins, dtype=float)
        return spins @ self._pair + self._linear - self.h

    def flip_delta(self, spins, i):
        """H(sigma with spin i flipped) - H(sigma) for a batch of configurations"""
        spins = np.asarray(spins, dtype=float)
        if self.supports_local_fields:
            fields = spins @ self._pair[:, i] + self._linear[i] - self.h
            return -2.0 * spins[..., i] * fields
        flipped = spins.copy()
        flipped[..., i] *= -1.0
        return self.energy(flipped) - self.energy(spins)

    def site_deltas(self, spins, sites):
        """flip_delta with its own site for every configuration of a (C, N) batch"""
        spins = np.asarray(spins, dtype=float)
        sites = np.asarray(sites)
        rows = np.arange(spins.shape[0])
        if self.supports_local_fields:
            fields = np.einsum('cn,nc->c', spins, self._pair[:, sites]) + self._linear[sites] - self.h
            return -2.0 * spins[rows, sites] * fields
        flipped = spins.copy()
        flipped[rows, sites] *= -1.0
        return self.energy(flipped) - self.energy(spins)

    def to_table(self):
        n = self.n_spins
        spins = spins_from_index(np.arange(2 ** n), n)
        return HamiltonianTable(n, self.energy(spins), seed=self.seed, h=self.h, method='tensor')


def _check_table_size(n_spins):
    n_max = get_setting('N_MAX_TABLE')
    if n_spins < 1:
        raise ValueError(f"N must be >= 1, got {n_spins}")
    if n_spins > n_max:
        raise ValueError(f"N={n_spins} exceeds the table limit N_MAX_TABLE={n_max}")


def _random_walsh_part(spec, n_spins, rng, size=None):
    stdevs = np.sqrt(walsh_level_variances(spec, n_spins))[popcount(np.arange(2 ** n_spins))]
    shape = (2 ** n_spins,) if size is None else (size, 2 ** n_spins)
    coefficients = rng.standard_normal(shape) * stdevs
    return walsh_hadamard(coefficients)


def sample_couplings(spec, n_spins, seed):
    """Draw CouplingTensors for the mixture at size N"""
    if n_spins < 1:
        raise ValueError(f"N must be >= 1, got {n_spins}")
    entries = sum(n_spins ** p for p, _ in spec.terms)
    if entries > TENSOR_MAX_ENTRIES:
        raise ValueError(
            f"Coupling tensors for N={n_spins} need {entries} entries (limit {TENSOR_MAX_ENTRIES})"
        )
    rng = np.random.default_rng(seed)
    tensors = {}
    for p, coeff in spec.terms:
        scale = np.sqrt(coeff) * n_spins ** ((1.0 - p) / 2.0)
        tensors[p] = scale * rng.standard_normal((n_spins,) * p)
    return CouplingTensors(n_spins, tensors, h=spec.h, seed=seed)


def sample_hamiltonian(spec, n_spins, seed, method='walsh'):
    """One realization of H_N as a table over all 2^N configurations"""
    if method not in SAMPLING_METHODS:
        raise ValueError(f"Unknown sampling method {method!r}")
    _check_table_size(n_spins)
    if method == 'tensor':
        return sample_couplings(spec, n_spins, seed).to_table()

    rng = np.random.default_rng(seed)
    values = field_term(spec.h, n_spins)
    if not spec.is_zero:
        values = values + _random_walsh_part(spec, n_spins, rng)
    logger.debug("Sampled N=%d Hamiltonian (seed=%s, method=walsh)", n_spins, seed)
    return HamiltonianTable(n_spins, values, seed=seed, h=spec.h, method='walsh')


def _monomial_features(spins, p):
    """Products sigma_{i1}...sigma_{ip} over all index tuples, shape (B, N^p)"""
    features = spins
    for _ in range(p - 1):
        features = np.einsum('bi,bj->bij', features, spins).reshape(spins.shape[0], -1)
    return features


def covariance_check(spec, n_spins, n_samples, seed, method='walsh', alpha=None):
    """
    Compare the empirical covariance of sampled Hamiltonians with N*xi(R12).

    The deterministic field term is subtracted. Each of the m distinct
    configuration pairs is held to the two-sided normal quantile at level
    alpha / m (COVARIANCE_ALPHA by default), so a correct sampler fails the
    whole table with probability of about alpha at most.
    """
    alpha = get_setting('COVARIANCE_ALPHA') if alpha is None else alpha
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n_max = get_setting('N_MAX_COVARIANCE_CHECK')
    if n_spins < 1 or n_spins > n_max:
        raise ValueError(f"covariance_check needs 1 <= N <= {n_max}, got {n_spins}")
    if n_samples < 2:
        raise ValueError("covariance_check needs at least 2 samples")
    rng = np.random.default_rng(seed)
    n_states = 2 ** n_spins

    if spec.is_zero:
        samples = np.zeros((n_samples, n_states))
    elif method == 'walsh':
        samples = _random_walsh_part(spec, n_spins, rng, size=n_samples)
    elif method == 'tensor':
        spins = spins_from_index(np.arange(n_states), n_spins)
        samples = np.zeros((n_samples, n_states))
        for p, coeff in spec.terms:
            scale = np.sqrt(coeff) * n_spins ** ((1.0 - p) / 2.0)
            couplings = scale * rng.standard_normal((n_samples, n_spins ** p))
            samples += couplings @ _monomial_features(spins, p).T
    else:
        raise ValueError(f"Unknown sampling method {method!r}")

    empirical = samples.T @ samples / n_samples
    second = (samples ** 2).T @ (samples ** 2) / n_samples
    stderr = np.sqrt(np.clip(second - empirical ** 2, 0.0, None) / n_samples)

    x = np.arange(n_states)
    distances = popcount(x[:, None] ^ x[None, :])
    overlaps = 1.0 - 2.0 * distances / n_spins
    expected = n_spins * spec.xi(overlaps)

    deviation = np.abs(empirical - expected)
    z_scores = np.where(stderr > 0, deviation / np.where(stderr > 0, stderr, 1.0), 0.0)
    n_pairs = n_states * (n_states + 1) // 2
    threshold = float(norm.isf(alpha / (2.0 * n_pairs)))
    passed = bool(np.all(deviation <= threshold * stderr + 1e-12))
    report = {
        'n_spins': n_spins,
        'n_samples': n_samples,
        'method': method,
        'max_deviation': float(deviation.max()),
        'max_z_score': float(z_scores.max()),
        'max_stderr': float(stderr.max()),
        'z_threshold': threshold,
        'passed': passed,
    }
    logger.info(
        "Covariance check N=%d (%s): max deviation %.4g, max z %.2f of %.2f, passed=%s",
        n_spins, method, report['max_deviation'], report['max_z_score'], threshold, passed,
    )
    return report
