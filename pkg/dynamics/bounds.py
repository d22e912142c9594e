"""
Landscape difficulty of a statistic and the spectral-gap bounds it controls
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mixtures.exceptions import InvariantViolation

from .kernels import build_metropolis, build_replicated, spectral_gap
from .overlaps import overlap_distribution

logger = logging.getLogger(__name__)

LOG4 = math.log(4.0)
BOUND_TOL = 1e-9


def overlap_lipschitz(n_spins):
    """R12 moves by 2/N across one Hamming edge of the replicated cube"""
    return 2.0 / n_spins


def barrier_factor(difficulty):
    """e^-D / (1 - 4 e^-D), decreasing for D > log 4"""
    if difficulty <= LOG4:
        raise ValueError(f"The difficulty {difficulty:g} does not exceed log 4")
    tail = math.exp(-difficulty)
    return tail / (1.0 - 4.0 * tail)


@dataclass
class DifficultyReport:
    statistic: str
    epsilon: float
    lipschitz: float
    e_grid: list = field(default_factory=list)
    s_values: list = field(default_factory=list)
    triple: tuple = None
    phi_value: float = -math.inf
    difficulty: float = -math.inf

    @property
    def is_difficult(self):
        return self.difficulty > LOG4

    def as_dict(self):
        return {
            'statistic': self.statistic,
            'epsilon': self.epsilon,
            'lipschitz': self.lipschitz,
            'triple': list(self.triple) if self.triple else None,
            'phi_value': self.phi_value,
            'difficulty': self.difficulty,
            'is_difficult': self.is_difficult,
            's_grid': [[e, s] for e, s in zip(self.e_grid, self.s_values)],
        }


def landscape_entropy(values, weights, energy, epsilon):
    """S(E, eps) = log nu(f in (E - eps, E + eps)), -inf on an empty window"""
    mass = weights[(values > energy - epsilon) & (values < energy + epsilon)].sum()
    return math.log(mass) if mass > 0.0 else -math.inf


def difficulty(source, epsilon, lipschitz=None, weights=None, statistic='overlap'):
    """
    eps-landscape difficulty: the largest S(E1) + S(E3) - S(E2) over triples
    with min(E2 - E1, E3 - E2) > 4 eps, scanned on an E-grid of step eps/4.
    `source` is an OverlapHistogram or an array of statistic values with `weights`.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if weights is None:
        values = source.support
        weights = source.probabilities
        lipschitz = overlap_lipschitz(source.n_spins) if lipschitz is None else lipschitz
    else:
        values = np.asarray(source, dtype=float)
        weights = np.asarray(weights, dtype=float)
    if lipschitz is None:
        raise ValueError("A general statistic needs its Lipschitz constant")

    step = epsilon / 4.0
    e_grid = np.arange(values.min() - epsilon, values.max() + epsilon + 0.5 * step, step)
    s_values = np.array([landscape_entropy(values, weights, e, epsilon) for e in e_grid])
    report = DifficultyReport(statistic, epsilon, lipschitz, e_grid.tolist(), s_values.tolist())

    finite = np.isfinite(s_values)
    separation = 4.0 * epsilon
    for j in np.flatnonzero(finite):
        left = finite & (e_grid < e_grid[j] - separation)
        right = finite & (e_grid > e_grid[j] + separation)
        if not left.any() or not right.any():
            continue
        i = np.flatnonzero(left)[np.argmax(s_values[left])]
        k = np.flatnonzero(right)[np.argmax(s_values[right])]
        phi = s_values[i] + s_values[k] - s_values[j]
        if phi > report.phi_value:
            report.phi_value = float(phi)
            report.triple = (float(e_grid[i]), float(e_grid[j]), float(e_grid[k]))
    report.difficulty = report.phi_value
    if report.triple is None:
        logger.info("No admissible triple for %s at eps=%g", statistic, epsilon)
    return report


def cheeger_bound(report, max_edge=1.0):
    """
    2 (K D / eps)^2 e^-D / (1 - 4 e^-D), or (None, reason) when eps <= 2 K D
    or the difficulty does not exceed log 4.
    """
    if report.epsilon <= 2.0 * report.lipschitz * max_edge:
        return None, f"eps={report.epsilon:g} does not exceed 2KD={2 * report.lipschitz * max_edge:g}"
    if not report.is_difficult:
        return None, f"difficulty {report.difficulty:g} does not exceed log 4"
    value = 2.0 * (report.lipschitz * max_edge / report.epsilon) ** 2 * barrier_factor(report.difficulty)
    return value, None


def testfn_bound(histogram, level=None, max_edge=1.0):
    """
    Rayleigh quotient bound of the piecewise-linear test function built on
    A = {R12 >= level}. On the replicated cube d(x, A) = ceil(N (level - R12)/2),
    so A_delta, its boundary layers and B are unions of overlap levels.

    Returns (bound, level, delta) for the smallest applicable bound over the
    integer widths delta, scanning every level when none is given, or None.
    """
    n = histogram.n_spins
    p = histogram.probabilities
    best = None
    # level index j <-> R12 = -1 + 2j/N; A = {index >= a}
    if level is None:
        candidates = range(1, n + 1)
    else:
        first = int(np.ceil(round(n * (level + 1.0) / 2.0, 9)))
        candidates = range(first, first + 1) if 1 <= first <= n else ()
    for a in candidates:
        mass_a = p[a:].sum()
        boundary_a = p[a]
        for delta in range(1, a + 1):
            outer = a - delta
            mass_outer = p[:outer].sum()
            if mass_outer <= 0.0:
                break
            # A_delta \ A, the top layer of A_delta^c and the boundary layer of A
            mass_b = p[outer:a].sum() + p[outer - 1] + boundary_a
            denominator = mass_a * mass_outer - 4.0 * mass_b ** 2
            if denominator <= 0.0:
                continue
            value = max_edge ** 2 / (2.0 * delta ** 2) * mass_b / denominator
            if best is None or value < best[0]:
                best = (value, float(-1.0 + 2.0 * a / n), delta)
    return best


def coercive_lower_bound(table, kernel=None):
    """A e^{-2 osc H} (2/N) with A = e^{-osc H}; the gap of I - Q dominates it"""
    oscillation = table.oscillation
    value = math.exp(-3.0 * oscillation) * 2.0 / table.n_spins
    if kernel is not None and kernel.kind != 'metropolis':
        raise ValueError("The coercive bound compares a Metropolis kernel with the simple random walk")
    return value


def cheeger_bound_check(kernel_replicated, report, histogram=None, gap=None, max_edge=1.0):
    """
    Evaluate the difficulty bound and the explicit test-function bound against
    the exact replicated gap; an applicable bound below the gap is an invariant violation.
    """
    if not kernel_replicated.replicated:
        raise ValueError("The overlap bounds apply to the replicated chain")
    gap = spectral_gap(kernel_replicated).value if gap is None else gap
    value, reason = cheeger_bound(report, max_edge)
    entries = {
        'replicated_gap': gap,
        'cheeger_bound': value,
        'cheeger_applicable': value is not None,
        'cheeger_reason': reason,
        'testfn_bound': None,
        'testfn_level': None,
        'testfn_width': None,
    }
    if value is not None and value < gap * (1.0 - BOUND_TOL):
        raise InvariantViolation("Difficulty bound below the exact replicated gap", entries)
    if histogram is not None:
        level = report.triple[1] if report.triple else None
        found = testfn_bound(histogram, level, max_edge)
        if found is not None:
            entries['testfn_bound'], entries['testfn_level'], entries['testfn_width'] = found
            if found[0] < gap * (1.0 - BOUND_TOL):
                raise InvariantViolation("Test-function bound below the exact replicated gap", entries)
    return entries


@dataclass
class SpectralReport:
    n_spins: int
    lambda1: float
    Lambda1: float = None
    cheeger_bound: float = None
    cheeger_reason: str = None
    testfn_bound: float = None
    coercive_lower: float = None
    residuals: dict = field(default_factory=dict)
    difficulty: DifficultyReport = None

    @property
    def identity_error(self):
        if self.Lambda1 is None:
            return None
        return abs(self.Lambda1 - 0.5 * self.lambda1)

    def as_dict(self):
        return {
            'n_spins': self.n_spins,
            'lambda1': self.lambda1,
            'Lambda1': self.Lambda1,
            'identity_error': self.identity_error,
            'cheeger_bound': self.cheeger_bound,
            'cheeger_reason': self.cheeger_reason,
            'testfn_bound': self.testfn_bound,
            'coercive_lower': self.coercive_lower,
            'residuals': self.residuals,
            'difficulty': self.difficulty.as_dict() if self.difficulty else None,
        }


def spectral_report(table, epsilon=None, replicated=True):
    """Exact gaps of the single and replicated Metropolis chains against every bound"""
    kernel = build_metropolis(table)
    kernel.check_invariants()
    single = spectral_gap(kernel)
    report = SpectralReport(table.n_spins, single.value, residuals={'lambda1': single.residual})
    report.coercive_lower = coercive_lower_bound(table, kernel)
    if report.coercive_lower > single.value * (1.0 + BOUND_TOL):
        raise InvariantViolation("Coercive lower bound exceeds the exact gap", report.as_dict())
    if not replicated:
        return report

    kernel_r = build_replicated(kernel)
    double = spectral_gap(kernel_r)
    report.Lambda1 = double.value
    report.residuals['Lambda1'] = double.residual
    histogram = overlap_distribution(table)
    epsilon = epsilon or 2.5 * overlap_lipschitz(table.n_spins)
    report.difficulty = difficulty(histogram, epsilon)
    entries = cheeger_bound_check(kernel_r, report.difficulty, histogram, gap=double.value)
    report.cheeger_bound = entries['cheeger_bound']
    report.cheeger_reason = entries['cheeger_reason']
    report.testfn_bound = entries['testfn_bound']
    logger.info(
        "N=%d gaps: lambda1=%.4e Lambda1=%.4e (identity error %.1e), test-function bound %s",
        table.n_spins, report.lambda1, report.Lambda1, report.identity_error, report.testfn_bound,
    )
    return report
