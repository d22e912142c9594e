"""
Overlap distributions under the two-replica Gibbs measure
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mixtures.conf import get_setting
from mixtures.sampling import popcount, sample_hamiltonian, walsh_hadamard

logger = logging.getLogger(__name__)


@dataclass
class OverlapHistogram:
    """Law of R12 on the grid {-1, -1 + 2/N, ..., 1}, ascending"""

    n_spins: int
    probabilities: np.ndarray
    stderr: np.ndarray = None
    mode: str = 'exact'
    n_samples: int = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if self.probabilities.shape != (self.n_spins + 1,):
            raise ValueError(f"Overlap histogram for N={self.n_spins} needs {self.n_spins + 1} levels")
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, dtype=float)

    @property
    def support(self):
        return np.linspace(-1.0, 1.0, self.n_spins + 1)

    def total(self):
        return float(self.probabilities.sum())

    def window(self, lo, hi):
        """Mask of levels strictly inside (lo, hi)"""
        support = self.support
        return (support > lo) & (support < hi)

    def mass(self, mask):
        return float(self.probabilities[mask].sum())

    def ball(self, q, epsilon):
        """Q_N(|R12 - q| < epsilon) and its standard error"""
        mask = self.window(q - epsilon, q + epsilon)
        error = None
        if self.stderr is not None:
            error = float(np.sqrt(np.sum(self.stderr[mask] ** 2)))
        return self.mass(mask), error

    def empirical_rate(self, q_grid, epsilon):
        """-(1/N) log Q_N(B_eps(q)) with delta-method errors"""
        rows = []
        for q in q_grid:
            mass, error = self.ball(float(q), epsilon)
            rate = -np.log(mass) / self.n_spins if mass > 0.0 else np.inf
            rate_error = error / (self.n_spins * mass) if error is not None and mass > 0.0 else None
            rows.append({'q': float(q), 'mass': mass, 'rate': float(rate), 'error': rate_error})
        return rows

    def total_variation(self, other):
        if other.n_spins != self.n_spins:
            raise ValueError("Histograms live on different overlap grids")
        return 0.5 * float(np.abs(self.probabilities - other.probabilities).sum())

    def rows(self):
        stderr = self.stderr if self.stderr is not None else [None] * (self.n_spins + 1)
        return [
            {'q': float(q), 'probability': float(p), 'stderr': None if s is None else float(s)}
            for q, p, s in zip(self.support, self.probabilities, stderr)
        ]

    def as_dict(self):
        return {
            'n_spins': self.n_spins,
            'mode': self.mode,
            'n_samples': self.n_samples,
            'rows': self.rows(),
        }


def overlap_distribution(table):
    """
    Exact law of R12 under pi x pi. The XOR autocorrelation
    c(z) = sum_x pi(x) pi(x ^ z) is a Walsh-Hadamard square; R12 = 1 - 2|z|/N.
    """
    n = table.n_spins
    n_max = get_setting('OVERLAP_EXACT_MAX_N')
    if n > n_max:
        raise ValueError(f"N={n} exceeds the exact overlap limit OVERLAP_EXACT_MAX_N={n_max}")
    pi = table.gibbs_weights()
    spectrum = walsh_hadamard(pi)
    correlation = np.clip(walsh_hadamard(spectrum ** 2) / table.n_states, 0.0, None)
    by_distance = np.bincount(popcount(np.arange(table.n_states)), weights=correlation, minlength=n + 1)
    # R12 ascends as the Hamming distance descends
    probabilities = by_distance[::-1] / by_distance.sum()
    return OverlapHistogram(n, probabilities, mode='exact')


def average_overlap_distribution(spec, n_spins, seeds=None, method='walsh', threads=1):
    """Disorder average of the exact overlap law with the across-seed spread as error"""
    if seeds is None:
        seeds = range(get_setting('DISORDER_SEEDS'))
    seeds = list(seeds)
    if not seeds:
        raise ValueError("Disorder averaging needs at least one seed")

    def one(seed):
        return overlap_distribution(sample_hamiltonian(spec, n_spins, seed, method=method)).probabilities

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        samples = np.array(list(pool.map(one, seeds)))
    spread = samples.std(axis=0, ddof=1) / np.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros(n_spins + 1)
    logger.info("Averaged overlap law of %s at N=%d over %d disorder samples", spec, n_spins, len(seeds))
    return OverlapHistogram(n_spins, samples.mean(axis=0), stderr=spread, mode='disorder-average', n_samples=len(seeds))


def overlap_lipschitz_constant(n_spins):
    """max |R12(a) - R12(b)| over Hamming edges of the replicated cube, by exhaustive scan"""
    if not 1 <= n_spins <= 6:
        raise ValueError("The edge scan is exhaustive and limited to N <= 6")
    states = np.arange(2 ** n_spins)
    first, second = np.meshgrid(states, states, indexing='ij')
    overlap = 1.0 - 2.0 * popcount(first ^ second) / n_spins
    largest = 0.0
    for i in range(n_spins):
        # flipping a spin of either replica changes x ^ y in the same bit
        flipped = 1.0 - 2.0 * popcount((first ^ (1 << i)) ^ second) / n_spins
        largest = max(largest, float(np.max(np.abs(flipped - overlap))))
    return largest
