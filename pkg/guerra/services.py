"""
Services module for the two-replica bound
Evaluates the degenerate-path functional, minimizes it over the Lagrange
multiplier, searches for overlap barriers and builds certified rate curves.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from mixtures.calculators import is_convex
from mixtures.conf import get_setting
from parisi.local_fields import local_field_stats, replicon
from parisi.solvers import GridParams, solve_recursion
from statics.calculators import ParisiCalculator

from .solvers import grid_2d, solve_gt

logger = logging.getLogger(__name__)

LAMBDA_METHODS = ('newton', 'grid')
NEWTON_MAX_ITER = 30
NEWTON_TOL = 1e-10
ATOM_MATCH_TOL = 1e-9
DEFAULT_OFFSETS = (0.01, 0.02, 0.05, 0.1)


@dataclass(frozen=True)
class GTValue:
    q: float
    lam: float
    value: float
    d_lambda: float
    d2_lambda: float
    v0: float

    def as_dict(self):
        return {
            'q': self.q,
            'lambda': self.lam,
            'value': self.value,
            'd_lambda': self.d_lambda,
            'd2_lambda': self.d2_lambda,
            'v0': self.v0,
        }


def lagrange_term(spec, mu):
    """L = int_0^1 xi''(t) t mu(t) dt on the degenerate path, independent of q"""
    return 2.0 * ParisiCalculator.correction(spec, mu)


def gt_value(spec, mu, q, lam, grid=None):
    """P(lam, q) = v(0, h) - lam q - L with its first two lambda-derivatives"""
    solution = solve_gt(spec, mu, q, lam, grid)
    v0, v_lambda, v_lambda2 = solution.v_at_start()
    value = v0 - lam * q - lagrange_term(spec, mu)
    return GTValue(float(q), float(lam), value, v_lambda - q, v_lambda2, v0)


def second_derivative_step(d_value, curvature_bound):
    """x* = -(2K)^-1 d_x f, the decrease step of the second-derivative test"""
    if curvature_bound <= 0.0:
        raise ValueError(f"The curvature bound K must be positive, got {curvature_bound}")
    return -d_value / (2.0 * curvature_bound)


def hessian_eigenpair(a, b):
    """Negative eigenvalue and eigenvector (normalized to second coordinate 1) of [[a, b], [b, 0]]"""
    if b == 0.0:
        raise ValueError("The off-diagonal entry b must be nonzero")
    root = math.sqrt(a * a + 4.0 * b * b)
    eigenvalue = 0.5 * (a - root)
    return eigenvalue, np.array([(a - root) / (2.0 * b), 1.0])


def minimize_lambda(spec, mu, q, grid=None, method='newton', window=None, n_points=None, start=0.0):
    """Minimize the convex map lam -> P(lam, q) over [-window, window]"""
    if method not in LAMBDA_METHODS:
        raise ValueError(f"Unknown lambda minimization method {method!r}")
    grid = grid or grid_2d()
    window = get_setting('LAMBDA_WINDOW') if window is None else window
    evaluations = []

    def evaluate(lam):
        result = gt_value(spec, mu, q, float(lam), grid)
        evaluations.append(result)
        return result

    if method == 'grid':
        n_points = n_points or get_setting('LAMBDA_GRID_POINTS')
        lambdas = np.linspace(-window, window, n_points)
        values = [evaluate(lam) for lam in lambdas]
        k = int(np.argmin([v.value for v in values]))
        lo, hi = lambdas[max(k - 1, 0)], lambdas[min(k + 1, n_points - 1)]
        minimize_scalar(lambda lam: evaluate(lam).value, bounds=(lo, hi), method='bounded',
                        options={'xatol': 1e-8})
        return min(evaluations, key=lambda v: v.value), len(evaluations)

    # Safeguarded Newton: lam -> P is convex, so the sign of d_lambda brackets the minimum
    lo, hi = -window, window
    current = evaluate(start)
    for _ in range(NEWTON_MAX_ITER):
        if abs(current.d_lambda) < NEWTON_TOL or hi - lo < 1e-12:
            break
        if current.d_lambda > 0.0:
            hi = min(hi, current.lam)
        else:
            lo = max(lo, current.lam)
        if current.d2_lambda > 0.0:
            candidate = current.lam - current.d_lambda / current.d2_lambda
        else:
            candidate = 0.5 * (lo + hi)
        if not lo < candidate < hi:
            candidate = 0.5 * (lo + hi)
        current = evaluate(candidate)
    return min(evaluations, key=lambda v: v.value), len(evaluations)


def curvature_profile(spec, mu, q, grid=None, window=None, n_points=5):
    """d_lam^2 v(0, h) across the lambda window against its value at lam = 0"""
    window = get_setting('LAMBDA_WINDOW') if window is None else window
    lambdas = np.linspace(-window, window, n_points)
    curvatures = [gt_value(spec, mu, q, lam, grid).d2_lambda for lam in lambdas]
    at_zero = gt_value(spec, mu, q, 0.0, grid).d2_lambda
    return {
        'lambdas': lambdas.tolist(),
        'curvatures': curvatures,
        'at_zero': at_zero,
        'bounded': max(curvatures) < 10.0 * at_zero,
    }


def atom_replicon(spec, mu, q_star, grid=None):
    """Replicon eigenvalue of mu at one of its atoms"""
    solution = solve_recursion(spec, mu, grid or GridParams.production(), keep='all')
    stats = local_field_stats(spec, mu, solution, q_star, method='density_quadrature')
    return replicon(spec, mu, solution, q_star, stats)


@dataclass
class BarrierResult:
    q_star: float
    replicon: float
    eigenvalue: float
    direction: tuple
    found: bool = False
    q: float = None
    lam: float = None
    gap: float = None
    lambda_zero_value: float = None
    evaluations: int = 0
    offsets_tried: list = field(default_factory=list)

    def as_dict(self):
        return {
            'q_star': self.q_star,
            'replicon': self.replicon,
            'eigenvalue': self.eigenvalue,
            'direction': list(self.direction),
            'found': self.found,
            'q': self.q,
            'lambda': self.lam,
            'gap': self.gap,
            'lambda_zero_value': self.lambda_zero_value,
            'budget': {'evaluations': self.evaluations, 'offsets_tried': self.offsets_tried},
        }


def barrier_search(spec, mu, q_star, search_opts=None):
    """
    Look for q near an atom q* with positive replicon and lam* where
    P(lam*, q) < 2 P_I(mu). The gap is measured against P(0, q) from the same
    grid, which equals 2 P_I(mu) analytically.
    """
    opts = dict(search_opts or {})
    grid = opts.get('grid') or grid_2d()
    offsets = sorted(opts.get('offsets', DEFAULT_OFFSETS))
    gap_tol = opts.get('gap_tol', get_setting('GFEB_TOL'))
    method = opts.get('method', 'newton')

    if np.min(np.abs(mu.atoms - q_star)) > ATOM_MATCH_TOL:
        raise ValueError(f"q*={q_star} is not an atom of {mu!r}")
    q_star = float(mu.atoms[np.argmin(np.abs(mu.atoms - q_star))])
    lam_r = atom_replicon(spec, mu, q_star, opts.get('grid_1d'))
    if lam_r <= 0.0:
        raise ValueError(f"Barrier search needs a positive replicon at q*={q_star}, got {lam_r:.3e}")

    at_star = gt_value(spec, mu, q_star, 0.0, grid)
    eigenvalue, direction = hessian_eigenpair(at_star.d2_lambda, -lam_r)
    result = BarrierResult(q_star, lam_r, eigenvalue, tuple(direction.tolist()), evaluations=1)

    for offset in offsets:
        best = None
        for sign in (1.0, -1.0):
            q = q_star + sign * offset
            if not 0.0 <= q <= 1.0:
                continue
            result.offsets_tried.append(q)
            base = gt_value(spec, mu, q, 0.0, grid)
            start = 0.0
            if base.d2_lambda > 0.0:
                start = second_derivative_step(base.d_lambda, 0.5 * base.d2_lambda)
            start = float(np.clip(start, -get_setting('LAMBDA_WINDOW'), get_setting('LAMBDA_WINDOW')))
            if start * direction[0] * (q - q_star) < 0.0:
                logger.debug("Second-derivative step at q=%g disagrees with the Hessian direction", q)
            optimum, n_eval = minimize_lambda(spec, mu, q, grid, method=method, start=start)
            result.evaluations += n_eval + 1
            gap = base.value - optimum.value
            if gap > gap_tol and (best is None or gap > best[2]):
                best = (q, optimum.lam, gap, base.value)
        if best is not None:
            result.found = True
            result.q, result.lam, result.gap, result.lambda_zero_value = best
            logger.info("Barrier near q*=%g: q=%g lam*=%g gap=%.3e", q_star, best[0], best[1], best[2])
            return result

    logger.warning(
        "No barrier found near q*=%g within %d evaluations (offsets %s)",
        q_star, result.evaluations, offsets,
    )
    return result


@dataclass
class RateCurve:
    q_grid: list
    i_lb: list
    is_zero: list
    zeros: list
    lambda_star: list
    h_cal: float
    gfeb: bool
    certificate: dict = None
    reference: float = None
    max_lambda_zero_error: float = None
    notes: list = field(default_factory=list)

    def rows(self):
        return [
            {'q': q, 'i_lb': i, 'is_zero': z, 'lambda_star': lam}
            for q, i, z, lam in zip(self.q_grid, self.i_lb, self.is_zero, self.lambda_star)
        ]

    def as_dict(self):
        return {
            'zeros': self.zeros,
            'h_cal': self.h_cal,
            'gfeb': self.gfeb,
            'certificate': self.certificate,
            'reference': self.reference,
            'max_lambda_zero_error': self.max_lambda_zero_error,
            'notes': self.notes,
        }


def _rate_at(spec, mu, q, grid, method):
    """I_lb(q) = P(0, q) - inf_lam P(lam, q), clamped at zero"""
    base = gt_value(spec, mu, q, 0.0, grid)
    optimum, _ = minimize_lambda(spec, mu, q, grid, method=method)
    return max(base.value - optimum.value, 0.0), optimum.lam, base.value


def best_triple(q_grid, i_lb, zeros):
    """Largest I_lb(q2) between two certified zeros, with its certificate"""
    best = None
    for q2, value in zip(q_grid, i_lb):
        left = [z for z in zeros if z < q2 - ATOM_MATCH_TOL]
        right = [z for z in zeros if z > q2 + ATOM_MATCH_TOL]
        if not left or not right:
            continue
        if best is None or value > best[1]:
            best = (q2, value, max(left), min(right))
    if best is None:
        return 0.0, None
    q2, value, q1, q3 = best
    epsilon = 0.2 * min(q3 - q2, q2 - q1)
    height = min(v for q, v in zip(q_grid, i_lb) if abs(q - q2) <= epsilon)
    certificate = {'q1': q1, 'q2': q2, 'q3': q3, 'epsilon': epsilon, 'height': height}
    return value, certificate


def rate_curve(spec, mu, q_grid, opts=None):
    """Certified lower bounds on the overlap rate function along q_grid"""
    opts = dict(opts or {})
    if not is_convex(spec):
        raise ValueError(f"The two-replica bound needs a convex mixture; {spec} is not")
    grid = opts.get('grid') or grid_2d()
    method = opts.get('method', 'newton')
    gfeb_tol = opts.get('gfeb_tol', get_setting('GFEB_TOL'))
    threads = max(1, int(opts.get('threads', 1)))
    q_grid = [float(q) for q in q_grid]
    if any(abs(q) > 1.0 for q in q_grid):
        raise ValueError("Overlaps must lie in [-1, 1]")

    symmetric = spec.is_even and spec.h == 0.0
    zeros = sorted({float(a) for a in mu.atoms} | ({-float(a) for a in mu.atoms} if symmetric else set()))
    notes = []
    if not symmetric and any(q < 0.0 for q in q_grid):
        notes.append("negative overlaps carry the trivial bound 0 without spin-flip symmetry")

    needed = sorted({abs(q) if symmetric else q for q in q_grid if q >= 0.0 or symmetric})
    with ThreadPoolExecutor(max_workers=threads) as pool:
        solved = dict(zip(needed, pool.map(lambda q: _rate_at(spec, mu, q, grid, method), needed)))

    i_lb, lambda_star, is_zero = [], [], []
    for q in q_grid:
        key = abs(q) if symmetric else q
        if key in solved:
            value, lam, _ = solved[key]
        else:
            value, lam = 0.0, 0.0
        i_lb.append(value)
        lambda_star.append(lam)
        is_zero.append(any(abs(q - z) <= ATOM_MATCH_TOL for z in zeros))

    reference = 2.0 * ParisiCalculator.value(spec, mu, opts.get('grid_1d'))
    max_error = max((abs(base - reference) for _, _, base in solved.values()), default=0.0)
    certified = [0.0 if z else v for v, z in zip(i_lb, is_zero)]
    h_cal, certificate = best_triple(q_grid, certified, zeros)
    curve = RateCurve(
        q_grid=q_grid, i_lb=i_lb, is_zero=is_zero, zeros=zeros, lambda_star=lambda_star,
        h_cal=h_cal, gfeb=h_cal > gfeb_tol, certificate=certificate if h_cal > gfeb_tol else None,
        reference=reference, max_lambda_zero_error=max_error, notes=notes,
    )
    logger.info("Rate curve for %s over %d points: h_cal=%.3e gfeb=%s", spec, len(q_grid), h_cal, curve.gfeb)
    return curve
