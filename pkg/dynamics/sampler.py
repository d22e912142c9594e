"""
Parallel tempering estimator of the overlap law for moderate N
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from mixtures.conf import get_setting
from mixtures.sampling import sample_couplings

from .overlaps import OverlapHistogram

logger = logging.getLogger(__name__)

LADDER_FLOOR = 0.1
RATE_SIGMAS = 3.0


def geometric_schedule(n_temps, floor=LADDER_FLOOR):
    """Hamiltonian scale factors floor, ..., 1.0 in geometric progression"""
    if n_temps < 1:
        raise ValueError("The ladder needs at least one temperature")
    if n_temps == 1:
        return np.array([1.0])
    return np.geomspace(floor, 1.0, n_temps)


def _check_schedule(schedule):
    schedule = np.asarray(schedule, dtype=float)
    if schedule.ndim != 1 or schedule.size == 0:
        raise ValueError("The temperature schedule must be a non-empty sequence")
    if np.any(schedule < 0.0) or np.any(np.diff(schedule) <= 0.0):
        raise ValueError("Scale factors must be non-negative and strictly increasing")
    if not np.isclose(schedule[-1], 1.0):
        raise ValueError("The last scale factor must be 1 (the target Gibbs measure)")
    return schedule


@dataclass
class McmcResult:
    histogram: OverlapHistogram
    schedule: np.ndarray
    swap_acceptance: np.ndarray
    n_sweeps: int
    burn_in: int
    seed: int
    notes: list = field(default_factory=list)

    @property
    def mixing_ok(self):
        if self.swap_acceptance.size == 0:
            return True
        return bool(self.swap_acceptance.min() >= get_setting('SWAP_ACCEPTANCE_MIN'))

    def rate_rows(self, q_grid, epsilon):
        return self.histogram.empirical_rate(q_grid, epsilon)

    def as_dict(self):
        return {
            'n_spins': self.histogram.n_spins,
            'n_sweeps': self.n_sweeps,
            'burn_in': self.burn_in,
            'seed': self.seed,
            'schedule': self.schedule.tolist(),
            'swap_acceptance': self.swap_acceptance.tolist(),
            'mixing_ok': self.mixing_ok,
            'notes': self.notes,
            'histogram': self.histogram.as_dict(),
        }


def _sweep(couplings, spins, energies, scales, rng):
    """N random-site Metropolis updates, each chain drawing its own sites"""
    n = couplings.n_spins
    rows = np.arange(spins.shape[0])
    for _ in range(n):
        sites = rng.integers(n, size=rows.size)
        delta = couplings.site_deltas(spins, sites)
        accept = rng.random(rows.size) < np.exp(-np.clip(scales * delta, 0.0, None))
        spins[rows[accept], sites[accept]] *= -1.0
        energies[accept] += delta[accept]


def _swap(energies, spins, schedule, replicas, parity, rng, accepted, attempted):
    """Replica exchange between neighbouring scale factors starting at `parity`"""
    n_temps = schedule.size
    for k in range(parity, n_temps - 1, 2):
        for r in range(replicas):
            lo, hi = k * replicas + r, (k + 1) * replicas + r
            log_ratio = (schedule[k] - schedule[k + 1]) * (energies[lo] - energies[hi])
            attempted[k] += 1
            if log_ratio >= 0.0 or rng.random() < np.exp(log_ratio):
                spins[[lo, hi]] = spins[[hi, lo]]
                energies[[lo, hi]] = energies[[hi, lo]]
                accepted[k] += 1


def mcmc_overlap(spec, n_spins, n_sweeps, seed, schedule=None, n_temps=8, batches=None,
                 burn_in=None, couplings=None):
    """
    Two replicas per scale factor of the ladder, random-site Metropolis sweeps
    followed by alternating replica exchange. The overlap of the two replicas at
    scale 1 is recorded after every sweep past burn-in; errors are batch means.
    """
    n_max = get_setting('MCMC_MAX_N')
    if not 1 <= n_spins <= n_max:
        raise ValueError(f"N={n_spins} outside the sampler range 1..MCMC_MAX_N={n_max}")
    batches = batches or get_setting('MCMC_BATCHES')
    burn_in = n_sweeps // 10 if burn_in is None else burn_in
    if n_sweeps - burn_in < batches:
        raise ValueError(f"{n_sweeps} sweeps with burn-in {burn_in} cannot fill {batches} batches")
    schedule = geometric_schedule(n_temps) if schedule is None else _check_schedule(schedule)

    disorder, chain_seed = np.random.SeedSequence(seed).spawn(2)
    if couplings is None:
        couplings = sample_couplings(spec, n_spins, int(disorder.generate_state(1)[0]))
    rng = np.random.default_rng(chain_seed)

    replicas = 2
    chains = schedule.size * replicas
    scales = np.repeat(schedule, replicas)
    spins = rng.choice([-1.0, 1.0], size=(chains, n_spins))
    energies = couplings.energy(spins)
    accepted = np.zeros(max(schedule.size - 1, 0))
    attempted = np.zeros_like(accepted)
    target = slice((schedule.size - 1) * replicas, schedule.size * replicas)

    levels = np.empty(n_sweeps - burn_in, dtype=int)
    for sweep in range(n_sweeps):
        _sweep(couplings, spins, energies, scales, rng)
        if schedule.size > 1:
            _swap(energies, spins, schedule, replicas, sweep % 2, rng, accepted, attempted)
        if sweep >= burn_in:
            first, second = spins[target]
            # Hamming distance d gives the level index N - d
            levels[sweep - burn_in] = n_spins - int(np.count_nonzero(first != second))

    per_batch = np.array([
        np.bincount(block, minlength=n_spins + 1) / block.size
        for block in np.array_split(levels, batches)
    ])
    histogram = OverlapHistogram(
        n_spins, per_batch.mean(axis=0),
        stderr=per_batch.std(axis=0, ddof=1) / np.sqrt(batches) if batches > 1 else None,
        mode='mcmc', n_samples=levels.size,
    )
    acceptance = np.divide(accepted, attempted, out=np.zeros_like(accepted), where=attempted > 0)
    result = McmcResult(histogram, schedule, acceptance, n_sweeps, burn_in, seed)
    if not result.mixing_ok:
        message = f"swap acceptance {acceptance.min():.3f} below {get_setting('SWAP_ACCEPTANCE_MIN')}"
        result.notes.append(message)
        logger.warning("Non-mixing run for N=%d seed=%s: %s", n_spins, seed, message)
    logger.info("Sampled %d overlaps of %s at N=%d over %d scale factors", levels.size, spec, n_spins, schedule.size)
    return result


def rate_consistency(result, curve, epsilon, sigmas=RATE_SIGMAS):
    """
    Compare -(1/N) log Q_N(B_eps(q)) against a certified lower bound I_lb(q):
    the empirical rate should not fall below I_lb - sigmas * error. Finite N
    makes this evidence, so disagreements are logged and returned, never raised.
    """
    rows = []
    empirical = {row['q']: row for row in result.rate_rows(curve.q_grid, epsilon)}
    for q, bound in zip(curve.q_grid, curve.i_lb):
        row = empirical[float(q)]
        error = row['error'] or 0.0
        consistent = bool(row['rate'] >= bound - sigmas * error)
        rows.append({**row, 'i_lb': bound, 'consistent': consistent})
        if not consistent:
            logger.warning("Empirical rate %.4f below I_lb %.4f at q=%.3f", row['rate'], bound, q)
    return rows
