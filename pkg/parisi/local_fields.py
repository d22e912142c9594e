"""
Expectations along the local field process
    dX = xi''(s) m(s) phi_x(s, X) ds + sqrt(xi''(s)) dW,   X_0 = h
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from mixtures.conf import get_setting

from .solvers import evaluate_slice, gauss_hermite

logger = logging.getLogger(__name__)

STATS_METHODS = ('sde_mc', 'density_quadrature')


@dataclass(frozen=True)
class LocalFieldStats:
    q: float
    e_phix_sq: float
    e_phixx_sq: float
    e_phix: float
    method: str
    mc_stderr: dict = None
    n_paths: int = 0

    def stderr(self, name):
        if not self.mc_stderr:
            return 0.0
        return self.mc_stderr.get(name, 0.0)

    def as_dict(self):
        return {
            'q': self.q,
            'e_phix_sq': self.e_phix_sq,
            'e_phixx_sq': self.e_phixx_sq,
            'e_phix': self.e_phix,
            'method': self.method,
            'mc_stderr': self.mc_stderr,
            'n_paths': self.n_paths,
        }


def _knots_up_to(sol, q):
    """Stored knots in [0, q) followed by q itself"""
    inner = sol.time_knots[sol.time_knots < q]
    return np.append(inner, q)


def _observables(slice_):
    _, phi_x, phi_xx = slice_
    return np.stack([phi_x ** 2, phi_xx ** 2, phi_x])


def _at_start(spec, sol, q, method):
    """q = 0: X_0 = h is deterministic"""
    _, phi_x, phi_xx = sol.evaluate(0.0, spec.h)
    phi_x = float(phi_x)
    phi_xx = float(phi_xx)
    stderr = {'e_phix_sq': 0.0, 'e_phixx_sq': 0.0, 'e_phix': 0.0} if method == 'sde_mc' else None
    return LocalFieldStats(q, phi_x ** 2, phi_xx ** 2, phi_x, method, stderr)


def _sde_monte_carlo(spec, sol, q, n_paths, seed, inner_steps):
    rng = np.random.default_rng(seed)
    x_grid = sol.x_grid
    knots = _knots_up_to(sol, q)
    paths = np.full(n_paths, spec.h)
    for t_lo, t_hi in zip(knots[:-1], knots[1:]):
        m = sol.m_at(t_lo)
        _, phi_x, _ = sol.slice_at(t_lo)
        sub = np.linspace(t_lo, t_hi, inner_steps + 1)
        for s_lo, s_hi in zip(sub[:-1], sub[1:]):
            variance = spec.xi(s_hi, 1) - spec.xi(s_lo, 1)
            if variance <= 0.0:
                continue
            drift = m * variance * np.interp(paths, x_grid, phi_x)
            paths = paths + drift + math.sqrt(variance) * rng.standard_normal(n_paths)
    _, phi_x, phi_xx = sol.slice_at(q)
    px = np.interp(paths, x_grid, phi_x)
    pxx = np.interp(paths, x_grid, phi_xx)
    samples = {'e_phix_sq': px ** 2, 'e_phixx_sq': pxx ** 2, 'e_phix': px}
    means = {name: float(values.mean()) for name, values in samples.items()}
    stderr = {name: float(values.std(ddof=1) / math.sqrt(n_paths)) for name, values in samples.items()}
    return means, stderr


def _refined_times(spec, knots, max_std):
    """Split knot intervals so every Gaussian step has standard deviation <= max_std"""
    times = [float(knots[0])]
    for lo, hi in zip(knots[:-1], knots[1:]):
        variance = spec.xi(hi, 1) - spec.xi(lo, 1)
        n_inner = max(1, math.ceil(math.sqrt(max(variance, 0.0)) / max_std))
        times.extend(np.linspace(lo, hi, n_inner + 1)[1:].tolist())
    return np.asarray(times)


def _density_quadrature(spec, sol, q):
    """
    Backward propagation of u(t, x) = E[g(X_q) | X_t = x] through the tilted
    Gaussian kernel
        u(t, x) = E[exp(m (phi(t+, x + aZ) - phi(t, x))) u(t+, x + aZ)],
    which is the transition law of X over an interval where m is constant.
    """
    x_grid = sol.x_grid
    nodes, weights = gauss_hermite(sol.grid.quad_order)
    times = _refined_times(spec, _knots_up_to(sol, q), sol.grid.max_step_std)
    upper = sol.slice_at(times[-1])
    u = _observables(upper)
    for k in range(times.size - 2, -1, -1):
        t_lo, t_hi = times[k], times[k + 1]
        variance = spec.xi(t_hi, 1) - spec.xi(t_lo, 1)
        if variance > 0.0:
            m = sol.m_at(t_lo)
            points = x_grid[None, :] + math.sqrt(variance) * nodes[:, None]
            phi_up, _, _ = evaluate_slice(x_grid, upper, points)
            log_tilt = m * phi_up + np.log(weights)[:, None]
            tilt = np.exp(log_tilt - log_tilt.max(axis=0, keepdims=True))
            tilt /= tilt.sum(axis=0, keepdims=True)
            inside = np.clip(points, x_grid[0], x_grid[-1])
            u = np.stack([np.sum(tilt * CubicSpline(x_grid, g)(inside), axis=0) for g in u])
        if k > 0:
            upper = sol.slice_at(t_lo)
    values = [float(CubicSpline(x_grid, g)(spec.h)) for g in u]
    return dict(zip(('e_phix_sq', 'e_phixx_sq', 'e_phix'), values))


def local_field_stats(spec, nu, sol, q, n_paths=None, seed=None, method='sde_mc', inner_steps=4):
    """E phi_x^2, E phi_xx^2 and E phi_x at (q, X_q)"""
    if method not in STATS_METHODS:
        raise ValueError(f"Unknown local field method {method!r}")
    if sol.measure != nu:
        raise ValueError("The solution was computed for a different measure")
    if not 0.0 <= q <= float(sol.time_knots[-1]):
        raise ValueError(f"q={q} is outside the span of the solution")
    q = float(q)
    if method == 'sde_mc':
        min_paths = get_setting('MIN_MC_PATHS')
        n_paths = min_paths if n_paths is None else int(n_paths)
        if n_paths < min_paths:
            raise ValueError(f"n_paths must be >= {min_paths}, got {n_paths}")
    if q == 0.0:
        return _at_start(spec, sol, q, method)

    if method == 'sde_mc':
        means, stderr = _sde_monte_carlo(spec, sol, q, n_paths, seed, inner_steps)
        stats = LocalFieldStats(q, means['e_phix_sq'], means['e_phixx_sq'], means['e_phix'],
                                method, stderr, n_paths)
    else:
        means = _density_quadrature(spec, sol, q)
        stats = LocalFieldStats(q, means['e_phix_sq'], means['e_phixx_sq'], means['e_phix'], method)
    logger.debug("Local field stats at q=%.4f (%s): %s", q, method, stats.as_dict())
    return stats


def replicon(spec, nu, sol, q, stats):
    """Lambda_R(q, nu) = 1 - xi''(q) E (phi_xx)^2(q, X_q)"""
    if abs(stats.q - q) > 1e-12:
        raise ValueError(f"Local field stats were computed at q={stats.q}, not q={q}")
    return 1.0 - spec.xi(q, 2) * stats.e_phixx_sq
