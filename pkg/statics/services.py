"""
Services module for Ising statics
Minimizes the Parisi functional over k-atomic measures and classifies the
minimizer (single atom, GRSB, GPREV).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import softmax

from mixtures.conf import get_setting
from parisi.local_fields import local_field_stats, replicon
from parisi.measures import AtomicMeasure
from parisi.solvers import GridParams, solve_recursion

from .calculators import ParisiCalculator

logger = logging.getLogger(__name__)

STARTS_AGREEMENT_TOL = 1e-5


@dataclass
class KrsbOptions:
    multi_starts: int = None
    seed: int = 0
    merge_tol: float = None
    atom_mass_tol: float = None
    gprev_tol: float = None
    maxiter: int = None
    search_grid: GridParams = None
    final_grid: GridParams = None
    stats_method: str = 'density_quadrature'
    n_paths: int = None
    threads: int = 1
    polish: bool = True
    diagnostics: bool = True

    def __post_init__(self):
        self.multi_starts = self.multi_starts or get_setting('MULTI_STARTS')
        self.merge_tol = self.merge_tol if self.merge_tol is not None else get_setting('MERGE_TOL')
        self.atom_mass_tol = self.atom_mass_tol if self.atom_mass_tol is not None else get_setting('ATOM_MASS_TOL')
        self.gprev_tol = self.gprev_tol if self.gprev_tol is not None else get_setting('GPREV_TOL')
        self.maxiter = self.maxiter or get_setting('OPTIMIZER_MAXITER')
        self.search_grid = self.search_grid or GridParams.coarse()
        self.final_grid = self.final_grid or GridParams.production()

    @classmethod
    def from_dict(cls, opts):
        if opts is None:
            return cls()
        if isinstance(opts, cls):
            return opts
        return cls(**opts)


@dataclass
class PhaseReport:
    spec: object
    minimizer: AtomicMeasure
    k_used: int
    free_energy: float
    atom_replicons: list = field(default_factory=list)
    fixed_point_residuals: list = field(default_factory=list)
    stats_stderr: list = field(default_factory=list)
    is_atom: bool = True
    grsb: bool = False
    gprev: bool = False
    gprev_witness: float = None
    converged: bool = True
    start_values: list = field(default_factory=list)
    starts_agree: bool = True
    beta_derivative: float = None
    notes: list = field(default_factory=list)

    @property
    def k_eff(self):
        return self.minimizer.k

    def as_dict(self):
        return {
            'mixture': self.spec.as_dict(),
            'minimizer': self.minimizer.as_dict(),
            'k_used': self.k_used,
            'k_eff': self.k_eff,
            'free_energy': self.free_energy,
            'atom_replicons': [[q, lam] for q, lam in self.atom_replicons],
            'fixed_point_residuals': self.fixed_point_residuals,
            'stats_stderr': self.stats_stderr,
            'flags': {
                'is_atom': self.is_atom,
                'grsb': self.grsb,
                'gprev': self.gprev,
                'converged': self.converged,
                'starts_agree': self.starts_agree,
            },
            'gprev_witness': self.gprev_witness,
            'start_values': self.start_values,
            'beta_derivative': self.beta_derivative,
            'notes': self.notes,
        }


def _measure_from_params(theta, k):
    """Sorted squared-sine atoms and softmax weights (last logit pinned at 0)"""
    atoms = np.sin(theta[:k]) ** 2
    weights = softmax(np.append(theta[k:], 0.0))
    return AtomicMeasure.from_unnormalized(atoms, weights)


def _params_from_measure(atoms, weights):
    theta_atoms = np.arcsin(np.sqrt(np.clip(atoms, 0.0, 1.0)))
    logits = np.log(np.clip(weights, 1e-12, None))
    return np.concatenate([theta_atoms, logits[:-1] - logits[-1]])


def _starts(k, n_starts, rng, single_atom_q):
    starts = [_params_from_measure((np.arange(k) + 0.5) / k, np.full(k, 1.0 / k))]
    spread = np.linspace(-0.05, 0.05, k) if k > 1 else np.zeros(1)
    starts.append(_params_from_measure(np.clip(single_atom_q + spread, 0.0, 1.0), np.full(k, 1.0 / k)))
    while len(starts) < n_starts:
        theta = rng.uniform(0.0, np.pi / 2, k)
        logits = rng.normal(0.0, 1.0, k - 1)
        starts.append(np.concatenate([theta, logits]))
    return starts[:max(n_starts, 1)]


def _run_nelder_mead(objective, x0, maxiter):
    return minimize(
        objective, x0, method='Nelder-Mead',
        options={'maxiter': maxiter, 'xatol': 1e-7, 'fatol': 1e-10, 'adaptive': True},
    )


def _diagnose(spec, mu, options, report):
    """Replicon and fixed-point residual at every atom"""
    solution = solve_recursion(spec, mu, options.final_grid, keep='all')
    for i, q in enumerate(mu.atoms):
        stats = local_field_stats(
            spec, mu, solution, float(q), n_paths=options.n_paths,
            seed=None if options.seed is None else options.seed + i, method=options.stats_method,
        )
        lam = replicon(spec, mu, solution, float(q), stats)
        report.atom_replicons.append((float(q), float(lam)))
        report.fixed_point_residuals.append(abs(stats.e_phix_sq - float(q)))
        report.stats_stderr.append(max(stats.stderr('e_phix_sq'), stats.stderr('e_phixx_sq')))


def minimize_krsb(spec, k, opts=None):
    """Minimize P_I over k-atomic measures with multi-start Nelder-Mead"""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    k = int(k)
    options = KrsbOptions.from_dict(opts)
    rng = np.random.default_rng(options.seed)

    single_q, _ = ParisiCalculator.best_single_atom(spec, options.search_grid)
    starts = _starts(k, options.multi_starts, rng, single_q)

    def objective(theta):
        return ParisiCalculator.value(spec, _measure_from_params(theta, k), options.search_grid)

    maxiter = options.maxiter * (2 * k - 1)
    with ThreadPoolExecutor(max_workers=max(1, options.threads)) as pool:
        results = list(pool.map(lambda x0: _run_nelder_mead(objective, x0, maxiter), starts))
    start_values = [float(r.fun) for r in results]
    best = min(results, key=lambda r: r.fun)
    converged = any(r.success for r in results)
    if not converged:
        logger.warning("k-RSB search for %s (k=%d) did not converge; reporting best found", spec, k)
    logger.info(
        "k-RSB search for %s (k=%d): best %.8f over %d starts (spread %.2e)",
        spec, k, best.fun, len(results), max(start_values) - min(start_values),
    )

    mu = _measure_from_params(best.x, k).merged(options.merge_tol).pruned(options.atom_mass_tol)

    if options.polish:
        k_eff = mu.k
        polished = _run_nelder_mead(
            lambda theta: ParisiCalculator.value(spec, _measure_from_params(theta, k_eff), options.final_grid),
            _params_from_measure(mu.atoms, mu.masses), options.maxiter * (2 * k_eff - 1),
        )
        mu = _measure_from_params(polished.x, k_eff).merged(options.merge_tol).pruned(options.atom_mass_tol)

    free_energy = ParisiCalculator.value(spec, mu, options.final_grid)
    notes = []

    # The minimizer must be no worse than any scanned single atom
    candidates = [single_q] + np.linspace(0.0, 1.0, 11).tolist()
    for q in candidates:
        value = ParisiCalculator.value(spec, AtomicMeasure.delta(q), options.final_grid)
        if value < free_energy:
            free_energy = value
            mu = AtomicMeasure.delta(q)
            notes.append(f"single atom at q={q:.6g} improved on the k-atomic search")

    report = PhaseReport(
        spec=spec,
        minimizer=mu,
        k_used=k,
        free_energy=free_energy,
        is_atom=mu.is_atom(options.atom_mass_tol),
        converged=converged,
        start_values=start_values,
        starts_agree=(max(start_values) - min(start_values)) <= STARTS_AGREEMENT_TOL,
        notes=notes,
    )
    report.grsb = not report.is_atom
    if spec.has_beta:
        report.beta_derivative = ParisiCalculator.free_energy_beta_derivative(spec, mu)
    if options.diagnostics:
        _diagnose(spec, mu, options, report)
        report.gprev, report.gprev_witness = check_gprev(spec, report, options.gprev_tol)
    report.notes.append("PREV concerns the limiting overlap law and is not decided from statics")
    return report


def check_gprev(spec, report, tol=None):
    """(True, q) when some atom has a replicon above tol, else (False, None)"""
    tol = get_setting('GPREV_TOL') if tol is None else tol
    best = None
    for q, lam in report.atom_replicons:
        if lam > tol and (best is None or lam > best[1]):
            best = (q, lam)
    if best is None:
        return False, None
    logger.debug("GPREV witness for %s: q=%.6f, replicon=%.6f", spec, best[0], best[1])
    return True, best[0]
