"""
Services module for spherical statics
Joint minimization of the spherical Parisi functional over (measure, b),
closed-form barrier search and certified rate curves on the sphere.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from guerra.services import (
    ATOM_MATCH_TOL, DEFAULT_OFFSETS, BarrierResult, RateCurve, best_triple,
    hessian_eigenpair, second_derivative_step,
)
from mixtures.conf import get_setting
from parisi.measures import AtomicMeasure
from statics.services import STARTS_AGREEMENT_TOL, _measure_from_params, _params_from_measure

from .calculators import (
    SphericalAnsatz, cs_functional, g_diagnostic, gt_value_sph, lambda_window, manifold_gap_bound,
    mixed_partial_sph, optimal_b, optimality_residuals, optimality_system, replicon_sph, sph_parisi,
)

logger = logging.getLogger(__name__)

# Atoms at 1 make phi vanish on a set of positive length
MAX_ATOM = 1.0 - 1e-9
WINDOW_SHRINK = 1.0 - 1e-9
NEWTON_MAX_ITER = 60
NEWTON_TOL = 1e-12


@dataclass
class SphericalOptions:
    multi_starts: int = None
    seed: int = 0
    merge_tol: float = None
    atom_mass_tol: float = None
    maxiter: int = None
    residual_tol: float = None
    threads: int = 1
    polish: bool = True
    diagnostics: bool = True

    def __post_init__(self):
        self.multi_starts = self.multi_starts or get_setting('MULTI_STARTS')
        self.merge_tol = self.merge_tol if self.merge_tol is not None else get_setting('MERGE_TOL')
        self.atom_mass_tol = self.atom_mass_tol if self.atom_mass_tol is not None else get_setting('ATOM_MASS_TOL')
        self.maxiter = self.maxiter or get_setting('OPTIMIZER_MAXITER')
        self.residual_tol = self.residual_tol or get_setting('SPHERICAL_RESIDUAL_TOL')

    @classmethod
    def from_dict(cls, opts):
        if opts is None:
            return cls()
        if isinstance(opts, cls):
            return opts
        return cls(**opts)


@dataclass
class SphericalOptReport:
    spec: object
    minimizer: AtomicMeasure
    b: float
    k_used: int
    ps_value: float
    cs_value: float
    residuals: dict = field(default_factory=dict)
    atom_replicons: list = field(default_factory=list)
    g_diagnostic: dict = None
    is_atom: bool = True
    converged: bool = True
    start_values: list = field(default_factory=list)
    starts_agree: bool = True
    notes: list = field(default_factory=list)

    @property
    def k_eff(self):
        return self.minimizer.k

    @property
    def ansatz(self):
        return SphericalAnsatz(self.minimizer, self.b)

    @property
    def free_energy(self):
        """F = P_S / 2 at the joint minimizer"""
        return 0.5 * self.ps_value

    @property
    def consistency_error(self):
        """|P_S - 2 C|, zero at the joint minimizer"""
        return abs(self.ps_value - 2.0 * self.cs_value)

    def max_residual(self):
        values = self.residuals.get('q_optimality', []) + self.residuals.get('phi_psi', [])
        return max(values + [self.residuals.get('b_optimality', 0.0)])

    def as_dict(self):
        return {
            'mixture': self.spec.as_dict(),
            'minimizer': self.minimizer.as_dict(),
            'b': self.b,
            'k_used': self.k_used,
            'k_eff': self.k_eff,
            'ps_value': self.ps_value,
            'cs_value': self.cs_value,
            'free_energy': self.free_energy,
            'consistency_error': self.consistency_error,
            'residuals': self.residuals,
            'atom_replicons': [list(row) for row in self.atom_replicons],
            'g_diagnostic': self.g_diagnostic,
            'flags': {
                'is_atom': self.is_atom,
                'converged': self.converged,
                'starts_agree': self.starts_agree,
            },
            'start_values': self.start_values,
            'notes': self.notes,
        }


def _clipped_measure(theta, k):
    mu = _measure_from_params(theta, k)
    if mu.q_max > MAX_ATOM:
        atoms = np.minimum(mu.atoms, MAX_ATOM)
        mu = AtomicMeasure.from_unnormalized(atoms, mu.masses)
    return mu


def profile_value(spec, mu):
    """min_b P_S(mu, b) with the inner convex search"""
    if mu.q_max >= 1.0:
        return math.inf
    return sph_parisi(spec, SphericalAnsatz(mu, optimal_b(spec, mu)))


def _starts(k, n_starts, rng):
    starts = [_params_from_measure((np.arange(k) + 0.5) / k, np.full(k, 1.0 / k))]
    starts.append(_params_from_measure(np.linspace(0.0, 0.9, k) if k > 1 else np.zeros(1), np.full(k, 1.0 / k)))
    while len(starts) < n_starts:
        starts.append(np.concatenate([rng.uniform(0.0, np.pi / 2, k), rng.normal(0.0, 1.0, k - 1)]))
    return starts[:max(n_starts, 1)]


def _nelder_mead(objective, x0, maxiter, xatol=1e-9, fatol=1e-13):
    return minimize(
        objective, x0, method='Nelder-Mead',
        options={'maxiter': maxiter, 'xatol': xatol, 'fatol': fatol, 'adaptive': True},
    )


def _ansatz_from_vector(x, k):
    atoms = x[:k]
    masses = np.append(x[k:2 * k - 1], 1.0 - np.sum(x[k:2 * k - 1]))
    return SphericalAnsatz(AtomicMeasure(atoms, masses), float(x[-1]))


def polish_stationary(spec, ansatz, value):
    """
    Drive the first-order system to zero from a nearby minimizer with a
    bounded trust-region least-squares solve; keep the result only when
    P_S does not increase.
    """
    mu = ansatz.nu
    k = mu.k
    size = 2 * k + 1

    def residuals(x):
        try:
            candidate = _ansatz_from_vector(x, k)
        except ValueError:
            return np.full(size, 1e3)
        if sph_parisi(spec, candidate) == math.inf:
            return np.full(size, 1e3)
        return optimality_system(spec, candidate)

    x0 = np.concatenate([mu.atoms, mu.masses[:-1], [ansatz.b]])
    lower = np.concatenate([np.zeros(k), np.full(k - 1, 1e-12), [1.0]])
    upper = np.concatenate([np.full(k, MAX_ATOM), np.ones(k - 1), [np.inf]])
    x0 = np.clip(x0, lower, np.where(np.isfinite(upper), upper, x0))
    solution = least_squares(residuals, x0, bounds=(lower, upper), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    try:
        candidate = _ansatz_from_vector(solution.x, k)
    except ValueError:
        return ansatz, value
    new_value = sph_parisi(spec, candidate)
    if new_value <= value + 1e-10 and np.max(np.abs(solution.fun)) < np.max(np.abs(residuals(x0))):
        return candidate, new_value
    return ansatz, value


def _attach_diagnostics(spec, ansatz, report, with_g=True):
    report.residuals = optimality_residuals(spec, ansatz)
    profile = ansatz.profile(spec)
    for q in ansatz.nu.atoms:
        q = float(q)
        alternative = (ansatz.b - profile.psi(q)) ** 2 - spec.xi(q, 2)
        report.atom_replicons.append((q, replicon_sph(spec, ansatz.nu, q), alternative))
    if with_g:
        report.g_diagnostic = g_diagnostic(spec, ansatz)


def report_for_measure(spec, mu, atom_mass_tol=None):
    """Report for a fixed measure, with b from the inner convex search"""
    atom_mass_tol = get_setting('ATOM_MASS_TOL') if atom_mass_tol is None else atom_mass_tol
    ansatz = SphericalAnsatz(mu, optimal_b(spec, mu))
    report = SphericalOptReport(
        spec=spec,
        minimizer=mu,
        b=ansatz.b,
        k_used=mu.k,
        ps_value=sph_parisi(spec, ansatz),
        cs_value=cs_functional(spec, mu),
        is_atom=mu.is_atom(atom_mass_tol),
        notes=['measure given, not optimized'],
    )
    _attach_diagnostics(spec, ansatz, report, with_g=False)
    return report


def minimize_spherical(spec, k, opts=None):
    """Minimize P_S over k-atomic measures and b, with b solved by the inner convex search"""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    k = int(k)
    options = SphericalOptions.from_dict(opts)
    rng = np.random.default_rng(options.seed)

    def objective(theta):
        return profile_value(spec, _clipped_measure(theta, k))

    maxiter = options.maxiter * (2 * k - 1)
    starts = _starts(k, options.multi_starts, rng)
    with ThreadPoolExecutor(max_workers=max(1, options.threads)) as pool:
        results = list(pool.map(lambda x0: _nelder_mead(objective, x0, maxiter), starts))
    start_values = [float(r.fun) for r in results]
    best = min(results, key=lambda r: r.fun)
    converged = any(r.success for r in results)
    if not converged:
        logger.warning("Spherical search for %s (k=%d) did not converge; reporting best found", spec, k)

    mu = _clipped_measure(best.x, k).merged(options.merge_tol).pruned(options.atom_mass_tol)
    notes = []
    # The merged measure is no worse than any scanned single atom
    value = profile_value(spec, mu)
    for q in np.linspace(0.0, 0.95, 20):
        candidate = AtomicMeasure.delta(float(q))
        scanned = profile_value(spec, candidate)
        if scanned < value:
            mu, value = candidate, scanned
            notes.append(f"single atom at q={q:.6g} improved on the k-atomic search")

    ansatz = SphericalAnsatz(mu, optimal_b(spec, mu))
    value = sph_parisi(spec, ansatz)
    if options.polish:
        ansatz, value = polish_stationary(spec, ansatz, value)
        mu = ansatz.nu.merged(options.merge_tol).pruned(options.atom_mass_tol)
        if mu != ansatz.nu:
            ansatz = SphericalAnsatz(mu, optimal_b(spec, mu))
            value = sph_parisi(spec, ansatz)

    report = SphericalOptReport(
        spec=spec,
        minimizer=ansatz.nu,
        b=ansatz.b,
        k_used=k,
        ps_value=value,
        cs_value=cs_functional(spec, ansatz.nu),
        is_atom=ansatz.nu.is_atom(options.atom_mass_tol),
        converged=converged,
        start_values=start_values,
        starts_agree=(max(start_values) - min(start_values)) <= STARTS_AGREEMENT_TOL,
        notes=notes,
    )
    _attach_diagnostics(spec, ansatz, report, options.diagnostics)
    if report.max_residual() > options.residual_tol:
        report.notes.append(f"optimality residual {report.max_residual():.2e} exceeds {options.residual_tol:g}")
    if report.consistency_error > 1e-6:
        report.notes.append(f"P_S and 2C differ by {report.consistency_error:.2e}")
    logger.info(
        "Spherical minimum for %s (k=%d): P_S=%.10f b=%.8f atoms=%s",
        spec, k, value, ansatz.b, ansatz.nu.atoms.tolist(),
    )
    return report


def minimize_lambda_sph(spec, ansatz, q, start=None):
    """
    Safeguarded Newton on the convex map lam -> P(lam, q) inside its admissible
    window. A `start` inside the window replaces the first Newton step from 0.
    """
    window = lambda_window(spec, ansatz) * WINDOW_SHRINK
    lo, hi = -window, window
    current = gt_value_sph(spec, ansatz, 0.0, q)
    evaluations = [current]
    for _ in range(NEWTON_MAX_ITER):
        if abs(current.d_lambda) < NEWTON_TOL or hi - lo < 1e-14:
            break
        if current.d_lambda > 0.0:
            hi = min(hi, current.lam)
        else:
            lo = max(lo, current.lam)
        if start is not None:
            candidate, start = start, None
        else:
            candidate = current.lam - current.d_lambda / current.d2_lambda
        if not lo < candidate < hi:
            candidate = 0.5 * (lo + hi)
        current = gt_value_sph(spec, ansatz, candidate, q)
        evaluations.append(current)
    return min(evaluations, key=lambda v: v.value), len(evaluations)


@dataclass
class SphericalBarrierResult(BarrierResult):
    epsilon: float = None
    rate_constant: float = None
    n_spins: int = None
    predicted_gap_bound: float = None

    def as_dict(self):
        payload = super().as_dict()
        payload.update({
            'epsilon': self.epsilon,
            'rate_constant': self.rate_constant,
            'n_spins': self.n_spins,
            'predicted_gap_bound': self.predicted_gap_bound,
        })
        return payload


def barrier_search_sph(spec, report, q_star, search_opts=None):
    """
    Closed-form barrier search near an atom q* with positive spherical replicon.
    A gap C = P(0, q) - P(lam*, q) > 0 gives e^{-CN} decay of the spectral gap;
    the manifold bound is evaluated at N with the N^{-1/2}-Lipschitz overlap map.
    """
    opts = dict(search_opts or {})
    offsets = sorted(opts.get('offsets', DEFAULT_OFFSETS))
    gap_tol = opts.get('gap_tol', get_setting('GFEB_TOL'))
    n_spins = opts.get('n_spins')
    ansatz = report.ansatz
    mu = ansatz.nu

    if np.min(np.abs(mu.atoms - q_star)) > ATOM_MATCH_TOL:
        raise ValueError(f"q*={q_star} is not an atom of {mu!r}")
    q_star = float(mu.atoms[np.argmin(np.abs(mu.atoms - q_star))])
    lam_r = replicon_sph(spec, mu, q_star)
    if lam_r <= 0.0:
        raise ValueError(f"Barrier search needs a positive replicon at q*={q_star}, got {lam_r:.3e}")

    at_star = gt_value_sph(spec, ansatz, 0.0, q_star)
    eigenvalue, direction = hessian_eigenpair(at_star.d2_lambda, mixed_partial_sph(spec, ansatz, q_star))
    result = SphericalBarrierResult(
        q_star, lam_r, eigenvalue, tuple(direction.tolist()), evaluations=1, n_spins=n_spins,
    )

    for offset in offsets:
        best = None
        for sign in (1.0, -1.0):
            q = q_star + sign * offset
            if not 0.0 <= q <= MAX_ATOM:
                continue
            result.offsets_tried.append(q)
            base = gt_value_sph(spec, ansatz, 0.0, q)
            start = None
            if base.d2_lambda > 0.0:
                start = second_derivative_step(base.d_lambda, 0.5 * base.d2_lambda)
                if start * direction[0] * (q - q_star) < 0.0:
                    logger.debug("Second-derivative step at q=%g disagrees with the Hessian direction", q)
            optimum, n_eval = minimize_lambda_sph(spec, ansatz, q, start=start)
            result.evaluations += n_eval + 1
            gap = base.value - optimum.value
            if gap > gap_tol and (best is None or gap > best[2]):
                best = (q, optimum.lam, gap, base.value, offset)
        if best is not None:
            result.found = True
            result.q, result.lam, result.gap, result.lambda_zero_value, used = best
            result.rate_constant = result.gap
            result.epsilon = opts.get('epsilon', 0.2 * used)
            if n_spins:
                lipschitz = 1.0 / math.sqrt(n_spins)
                result.predicted_gap_bound = manifold_gap_bound(
                    lipschitz, result.epsilon, result.rate_constant * n_spins,
                )
            logger.info("Spherical barrier near q*=%g: q=%g lam*=%g C=%.3e", q_star, result.q, result.lam, result.gap)
            return result

    logger.warning("No spherical barrier near q*=%g within %d evaluations", q_star, result.evaluations)
    return result


def rate_curve_sph(spec, report, q_grid, opts=None):
    """I_lb(q) = P_S - inf_lam P(lam, q) along q_grid with the certified triple"""
    opts = dict(opts or {})
    gfeb_tol = opts.get('gfeb_tol', get_setting('GFEB_TOL'))
    threads = max(1, int(opts.get('threads', 1)))
    ansatz = report.ansatz
    reference = report.ps_value
    q_grid = [float(q) for q in q_grid]
    if any(abs(q) > 1.0 for q in q_grid):
        raise ValueError("Overlaps must lie in [-1, 1]")

    symmetric = spec.is_even and spec.h == 0.0
    atoms = {float(a) for a in ansatz.nu.atoms}
    zeros = sorted(atoms | ({-a for a in atoms} if symmetric else set()))
    notes = []
    if not symmetric and any(q < 0.0 for q in q_grid):
        notes.append("negative overlaps carry the trivial bound 0 without spin-flip symmetry")

    def solve_at(q):
        base = gt_value_sph(spec, ansatz, 0.0, q)
        optimum, _ = minimize_lambda_sph(spec, ansatz, q)
        return max(base.value - optimum.value, 0.0), optimum.lam, base.value

    needed = sorted({min(abs(q) if symmetric else q, MAX_ATOM) for q in q_grid if q >= 0.0 or symmetric})
    with ThreadPoolExecutor(max_workers=threads) as pool:
        solved = dict(zip(needed, pool.map(solve_at, needed)))

    i_lb, lambda_star, is_zero = [], [], []
    for q in q_grid:
        key = min(abs(q) if symmetric else q, MAX_ATOM)
        value, lam = solved[key][:2] if key in solved else (0.0, 0.0)
        i_lb.append(value)
        lambda_star.append(lam)
        is_zero.append(any(abs(q - z) <= ATOM_MATCH_TOL for z in zeros))

    max_error = max((abs(base - reference) for _, _, base in solved.values()), default=0.0)
    certified = [0.0 if z else v for v, z in zip(i_lb, is_zero)]
    h_cal, certificate = best_triple(q_grid, certified, zeros)
    return RateCurve(
        q_grid=q_grid, i_lb=i_lb, is_zero=is_zero, zeros=zeros, lambda_star=lambda_star,
        h_cal=h_cal, gfeb=h_cal > gfeb_tol, certificate=certificate if h_cal > gfeb_tol else None,
        reference=reference, max_lambda_zero_error=max_error, notes=notes,
    )
