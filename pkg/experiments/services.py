"""
Services module for experiments
Wires the statics, interpolation, spherical and dynamics apps into the five
reproducible runs behind the management commands, and keeps the run ledger.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from django.conf import settings
from django.db import DatabaseError

from dynamics.bounds import overlap_lipschitz, spectral_report
from dynamics.overlaps import overlap_distribution
from dynamics.sampler import mcmc_overlap, rate_consistency
from guerra.services import atom_replicon, barrier_search, rate_curve
from guerra.solvers import grid_2d
from mixtures.calculators import is_convex
from mixtures.conf import get_setting
from mixtures.exceptions import ConvergenceError
from mixtures.sampling import sample_couplings, sample_hamiltonian
from parisi.solvers import GridParams
from spherical.calculators import atom_criterion_pure_p
from spherical.services import (
    SphericalOptions, barrier_search_sph, minimize_spherical, rate_curve_sph, report_for_measure,
)
from statics.services import KrsbOptions, minimize_krsb

from .models import ExperimentRun

logger = logging.getLogger(__name__)

DEFAULT_K = 2
DEFAULT_Q_MAX = 0.95
DEFAULT_Q_POINTS = 20


# Run ledger

def open_run(config, out_dir):
    """Ledger row for a starting run; None when recording is off or the table is missing"""
    if not get_setting('RECORD_RUNS'):
        return None
    try:
        return ExperimentRun.objects.create(
            command=config.command,
            config=config.as_dict(),
            seed=config.seed,
            threads=config.threads,
            output_dir=str(out_dir),
            code_version=getattr(settings, 'TOOLKIT_VERSION', ''),
        )
    except DatabaseError as exc:
        logger.warning("Run ledger unavailable (%s); run %s is not recorded", exc, config.command)
        return None


def close_run(run, status, exit_code, message=''):
    if run is None:
        return
    try:
        run.finish(status, exit_code, message[:2000])
    except DatabaseError as exc:
        logger.warning("Could not close ledger entry %s: %s", run.pk, exc)


# Shared helpers

def _krsb_options(config, **extra):
    opts = config.options
    grid_points = opts.get('grid_points')
    params = {
        'seed': config.seed,
        'threads': config.threads,
        'multi_starts': opts.get('multi_starts'),
    }
    if grid_points:
        params['search_grid'] = GridParams.coarse(n_points=grid_points)
        params['final_grid'] = GridParams.production(n_points=grid_points)
    params.update(extra)
    return KrsbOptions(**params)


def _spherical_options(config, **extra):
    params = {'seed': config.seed, 'threads': config.threads, 'multi_starts': config.options.get('multi_starts')}
    params.update(extra)
    return SphericalOptions(**params)


def _grid_2d(config):
    grid_points = config.options.get('grid_points')
    return grid_2d(n_points=grid_points) if grid_points else None


def _require_beta(config):
    if not config.spec.has_beta:
        raise ValueError(f"{config.command} scans beta and needs a [model] given as beta with xi0_terms")


def _positive_replicon(replicons):
    """Atom with the largest positive replicon, or None"""
    positive = [(q, lam) for q, lam in replicons if lam > 0.0]
    if not positive:
        return None
    return max(positive, key=lambda item: item[1])[0]


def _require_convex(spec):
    if not is_convex(spec):
        raise ValueError(
            f"The overlap rate bound assumes a convex covariance (xi'' >= 0 on [-1, 1]); {spec} is not convex"
        )


def _q_grid(opts):
    if opts.get('q_grid'):
        return [float(q) for q in opts['q_grid']]
    q_min = opts.get('q_min', 0.0)
    q_max = opts.get('q_max', DEFAULT_Q_MAX)
    if q_max <= q_min:
        raise ValueError(f"q_max={q_max} must exceed q_min={q_min}")
    return np.linspace(q_min, q_max, opts.get('q_points', DEFAULT_Q_POINTS)).tolist()


# Phase scan

PHASE_SCAN_COLUMNS = [
    'beta', 'status', 'free_energy', 'k_eff', 'is_atom', 'grsb', 'gprev', 'gprev_witness',
    'beta_derivative', 'atom_criterion', 'barrier_gap', 'barrier_q', 'refined', 'message',
]


@dataclass
class PhaseScanRow:
    beta: float
    status: str = 'success'
    free_energy: float = None
    k_eff: int = None
    is_atom: bool = None
    grsb: bool = None
    gprev: bool = None
    gprev_witness: float = None
    beta_derivative: float = None
    atom_criterion: bool = None
    barrier_gap: float = None
    barrier_q: float = None
    refined: bool = False
    message: str = ''

    @property
    def ok(self):
        return self.status == 'success'

    def as_dict(self):
        return asdict(self)


@dataclass
class PhaseScanResult:
    rows: list
    beta_s: float = None
    beta_gfeb: float = None
    notes: list = field(default_factory=list)

    def summary(self):
        return {
            'beta_s': self.beta_s,
            'beta_gfeb': self.beta_gfeb,
            'n_rows': len(self.rows),
            'failed_rows': [row.beta for row in self.rows if not row.ok],
            'notes': self.notes,
        }


def _spherical_phase(config, spec, row):
    report = minimize_spherical(spec, config.options.get('k', DEFAULT_K), _spherical_options(config, threads=1))
    replicons = [(q, lam) for q, lam, _ in report.atom_replicons]
    witness = _positive_replicon([(q, lam) for q, lam in replicons if lam > get_setting('GPREV_TOL')])
    row.gprev, row.gprev_witness = witness is not None, witness
    if spec.h == 0.0 and spec.has_beta:
        row.atom_criterion = atom_criterion_pure_p(spec)
    return report, replicons


def _ising_phase(config, spec, row):
    report = minimize_krsb(spec, config.options.get('k', DEFAULT_K), _krsb_options(config, threads=1))
    row.gprev, row.gprev_witness = report.gprev, report.gprev_witness
    row.beta_derivative = report.beta_derivative
    return report, report.atom_replicons


def _phase_row(config, beta, refined=False):
    spec = config.spec_at(beta)
    row = PhaseScanRow(beta=float(beta), refined=refined)
    try:
        if config.spherical:
            report, replicons = _spherical_phase(config, spec, row)
        else:
            report, replicons = _ising_phase(config, spec, row)
    except ConvergenceError as exc:
        logger.warning("Phase scan row beta=%g failed: %s", beta, exc)
        row.status, row.message = 'not_converged', str(exc)
        return row

    row.free_energy = report.free_energy
    row.k_eff = report.k_eff
    row.is_atom = report.is_atom
    row.grsb = not report.is_atom
    if not report.converged:
        row.status, row.message = 'not_converged', 'optimizer did not converge; best value reported'

    q_star = _positive_replicon(replicons)
    if config.options.get('barrier') and q_star is not None:
        search_opts = {}
        if config.options.get('offsets'):
            search_opts['offsets'] = config.options['offsets']
        if config.spherical:
            barrier = barrier_search_sph(spec, report, q_star, search_opts)
        else:
            search_opts['grid'] = _grid_2d(config)
            barrier = barrier_search(spec, report.minimizer, q_star, search_opts)
        if barrier.found:
            row.barrier_gap, row.barrier_q = barrier.gap, barrier.q
    return row


def _bisect(config, rows, steps):
    """Refine every adjacent pair of successful rows whose single-atom flag flips"""
    refined = []
    ordered = [row for row in rows if row.is_atom is not None]
    for lo, hi in zip(ordered, ordered[1:]):
        if lo.is_atom == hi.is_atom:
            continue
        for _ in range(steps):
            middle = _phase_row(config, 0.5 * (lo.beta + hi.beta), refined=True)
            refined.append(middle)
            if middle.is_atom is None:
                break
            if middle.is_atom == lo.is_atom:
                lo = middle
            else:
                hi = middle
    return refined


def phase_scan(config):
    """Minimizer flags along an ascending beta grid with optional barrier search"""
    _require_beta(config)
    betas = config.options.get('betas') or []
    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        rows = list(pool.map(lambda beta: _phase_row(config, beta), betas))
    rows += _bisect(config, rows, config.options.get('bisect', 0))
    rows.sort(key=lambda row: row.beta)

    result = PhaseScanResult(rows)
    # Rows whose optimizer stopped early still carry the best measure found
    good = [row for row in rows if row.is_atom is not None]
    singles = [row.beta for row in good if row.is_atom]
    barriers = [row.beta for row in good if row.barrier_gap is not None]
    result.beta_s = max(singles) if singles else None
    result.beta_gfeb = min(barriers) if barriers else None

    flags = [row.is_atom for row in good]
    if any(not a and b for a, b in zip(flags, flags[1:])):
        result.notes.append("single-atom flag re-enters along the grid")
    if result.beta_s is not None and result.beta_gfeb is not None and result.beta_gfeb > result.beta_s:
        result.notes.append(
            f"barrier first found at beta={result.beta_gfeb:g} above the last single-atom beta={result.beta_s:g}"
        )
    logger.info(
        "Phase scan of %s over %d rows: beta_s=%s beta_gfeb=%s",
        config.spec, len(rows), result.beta_s, result.beta_gfeb,
    )
    return result


# Exact gaps

EXACT_GAP_COLUMNS = [
    'beta', 'seed', 'n_spins', 'lambda1', 'log_lambda1_per_n', 'Lambda1', 'identity_error',
    'coercive_lower', 'cheeger_bound', 'cheeger_reason', 'testfn_bound', 'difficulty', 'barrier_flagged',
]

EXACT_GAP_SUMMARY_COLUMNS = [
    'beta', 'n_seeds', 'mean_log_lambda1_per_n', 'std_log_lambda1_per_n', 'srw_reference',
    'max_identity_error', 'barriers_flagged',
]


def _gap_row(beta, seed, report):
    difficulty = report.difficulty
    return {
        'beta': beta,
        'seed': seed,
        'n_spins': report.n_spins,
        'lambda1': report.lambda1,
        'log_lambda1_per_n': math.log(report.lambda1) / report.n_spins,
        'Lambda1': report.Lambda1,
        'identity_error': report.identity_error,
        'coercive_lower': report.coercive_lower,
        'cheeger_bound': report.cheeger_bound,
        'cheeger_reason': report.cheeger_reason,
        'testfn_bound': report.testfn_bound,
        'difficulty': difficulty.difficulty if difficulty else None,
        'barrier_flagged': difficulty.is_difficult if difficulty else False,
    }


def exact_gap(config):
    """Exact Metropolis gaps against every bound over betas x disorder seeds"""
    if config.spherical:
        raise ValueError("exact_gap enumerates the Ising cube; the spherical model is not supported")
    opts = config.options
    n_spins = opts['n_spins']
    if n_spins > get_setting('N_MAX_TABLE'):
        raise ValueError(f"N={n_spins} exceeds N_MAX_TABLE={get_setting('N_MAX_TABLE')}")
    if any(beta > 0.0 for beta in opts['betas']):
        _require_beta(config)
    n_seeds = opts.get('seeds') or get_setting('DISORDER_SEEDS')
    method = opts.get('method') or 'walsh'
    replicated = n_spins <= get_setting('REPLICATED_MAX_N')
    if not replicated:
        logger.warning("N=%d above REPLICATED_MAX_N; only the single-chain gap is computed", n_spins)

    specs = {beta: config.spec_at(beta) for beta in opts['betas']}
    jobs = [(beta, config.seed + i) for beta in opts['betas'] for i in range(n_seeds)]

    def run(job):
        beta, seed = job
        table = sample_hamiltonian(specs[beta], n_spins, seed, method=method)
        report = spectral_report(table, opts.get('epsilon'), replicated=replicated)
        return _gap_row(beta, seed, report), report

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        results = list(pool.map(run, jobs))
    rows = [row for row, _ in results]

    summary = []
    for beta in opts['betas']:
        rates = np.array([row['log_lambda1_per_n'] for row in rows if row['beta'] == beta])
        errors = [row['identity_error'] for row in rows if row['beta'] == beta and row['identity_error'] is not None]
        summary.append({
            'beta': beta,
            'n_seeds': rates.size,
            'mean_log_lambda1_per_n': float(rates.mean()),
            'std_log_lambda1_per_n': float(rates.std(ddof=1)) if rates.size > 1 else 0.0,
            'srw_reference': math.log(2.0 / n_spins) / n_spins,
            'max_identity_error': max(errors) if errors else None,
            'barriers_flagged': sum(1 for row in rows if row['beta'] == beta and row['barrier_flagged']),
        })
    logger.info("Exact gaps at N=%d over %d instances, all bounds verified", n_spins, len(rows))
    return rows, summary, [report.as_dict() for _, report in results]


# Rate curve

RATE_CURVE_COLUMNS = ['q', 'i_lb', 'is_zero', 'lambda_star']
OVERLAY_COLUMNS = ['mcmc_mass', 'mcmc_rate', 'mcmc_error', 'consistent']


def _measure_and_report(config, spec, k):
    """(measure, spherical report or None) from the config or the optimizer"""
    if config.spherical:
        if config.measure is not None:
            report = report_for_measure(spec, config.measure)
        else:
            report = minimize_spherical(spec, k, _spherical_options(config))
        return report.minimizer, report
    if config.measure is not None:
        return config.measure, None
    return minimize_krsb(spec, k, _krsb_options(config)).minimizer, None


def rate_curve_run(config):
    """Certified I_lb(q) curve, its height and the predicted gap decay rate"""
    spec = config.spec
    opts = config.options
    _require_convex(spec)
    q_grid = _q_grid(opts)
    mu, report = _measure_and_report(config, spec, opts.get('k', DEFAULT_K))

    if config.spherical:
        curve = rate_curve_sph(spec, report, q_grid, {'threads': config.threads})
    else:
        curve_opts = {'threads': config.threads, 'method': opts.get('lambda_method') or 'newton'}
        if opts.get('grid_points'):
            curve_opts['grid'] = _grid_2d(config)
        curve = rate_curve(spec, mu, q_grid, curve_opts)

    rows = curve.rows()
    columns = list(RATE_CURVE_COLUMNS)
    overlay = None
    if opts.get('mcmc_n_spins'):
        if config.spherical:
            raise ValueError("The MCMC overlay samples the Ising cube and cannot accompany a spherical model")
        n_spins = opts['mcmc_n_spins']
        result = mcmc_overlap(spec, n_spins, opts.get('mcmc_sweeps', 2000), config.seed)
        epsilon = opts.get('epsilon') or 2.5 * overlap_lipschitz(n_spins)
        checks = rate_consistency(result, curve, epsilon)
        for row, check in zip(rows, checks):
            row.update({
                'mcmc_mass': check['mass'], 'mcmc_rate': check['rate'],
                'mcmc_error': check['error'], 'consistent': check['consistent'],
            })
        columns += OVERLAY_COLUMNS
        overlay = {'n_spins': n_spins, 'epsilon': epsilon, 'mixing_ok': result.mixing_ok,
                   'all_consistent': all(check['consistent'] for check in checks)}

    summary = {
        'measure': mu.as_dict(),
        'h_cal': curve.h_cal,
        'gfeb': curve.gfeb,
        'predicted_gap_rate': -curve.h_cal,
        'zeros': curve.zeros,
        'reference': curve.reference,
        'max_lambda_zero_error': curve.max_lambda_zero_error,
        'notes': curve.notes,
        'overlay': overlay,
    }
    return curve, rows, columns, summary


# Barrier certificate

def barrier_run(config):
    """Barrier search near one atom of a given or optimized measure"""
    spec = config.spec
    opts = config.options
    mu, report = _measure_and_report(config, spec, opts.get('k', DEFAULT_K))
    if config.spherical:
        replicons = [(q, lam) for q, lam, _ in report.atom_replicons]
    else:
        replicons = [(float(q), atom_replicon(spec, mu, float(q))) for q in mu.atoms]

    q_star = opts.get('q_star')
    if q_star is None:
        q_star = _positive_replicon(replicons)
        if q_star is None:
            raise ValueError(f"No atom of {mu!r} has a positive replicon; nothing to search from")

    search_opts = {key: opts[key] for key in ('offsets', 'n_spins', 'epsilon') if key in opts}
    if config.spherical:
        result = barrier_search_sph(spec, report, q_star, search_opts)
    else:
        search_opts.pop('n_spins', None)
        search_opts.pop('epsilon', None)
        search_opts['grid'] = _grid_2d(config)
        result = barrier_search(spec, mu, q_star, search_opts)
    return {
        'mixture': spec.as_dict(),
        'measure': mu.as_dict(),
        'replicons': [[q, lam] for q, lam in replicons],
        'barrier': result.as_dict(),
    }


# Overlap sampler

def mcmc_run(config):
    """Parallel tempering overlap law, compared with enumeration when N allows"""
    if config.spherical:
        raise ValueError("The overlap sampler runs on the Ising cube only")
    spec = config.spec
    opts = config.options
    n_spins = opts['n_spins']
    exact_limit = get_setting('OVERLAP_EXACT_MAX_N')
    if opts.get('exact') and n_spins > exact_limit:
        raise ValueError(f"Exact comparison needs N <= OVERLAP_EXACT_MAX_N={exact_limit}, got {n_spins}")
    couplings = sample_couplings(spec, n_spins, config.seed)
    result = mcmc_overlap(
        spec, n_spins, opts['sweeps'], config.seed,
        schedule=opts.get('schedule'), n_temps=opts.get('n_temps', 8),
        batches=opts.get('batches'), burn_in=opts.get('burn_in'), couplings=couplings,
    )

    summary = result.as_dict()
    summary.pop('histogram')
    rows = result.histogram.rows()
    if n_spins <= exact_limit:
        exact = overlap_distribution(couplings.to_table())
        summary['total_variation'] = result.histogram.total_variation(exact)
        for row, p in zip(rows, exact.probabilities):
            row['exact'] = float(p)

    epsilon = opts.get('epsilon') or 2.5 * overlap_lipschitz(n_spins)
    q_grid = np.linspace(0.0, 1.0, opts.get('q_points', DEFAULT_Q_POINTS)).tolist()
    rate_rows = result.rate_rows(q_grid, epsilon)
    if opts.get('rate_overlay'):
        _require_convex(spec)
        mu = minimize_krsb(spec, opts.get('k', DEFAULT_K), _krsb_options(config)).minimizer
        curve = rate_curve(spec, mu, q_grid, {'threads': config.threads})
        rate_rows = rate_consistency(result, curve, epsilon)
        summary['all_consistent'] = all(row['consistent'] for row in rate_rows)
    summary['epsilon'] = epsilon
    return rows, rate_rows, summary
