"""
Solvers for the two-replica Parisi PDE on the degenerate path.

For t >= q the diffusion matrix is xi''(t) times the identity and u solves
    d_t u + (xi''/2) (Laplacian u + nu(t) |grad u|^2) = 0,   u(1) = f_lam,
which is integrated by the exponential-linearization recursion split into
one Gaussian step per axis. For t <= q the diffusion runs along the diagonal
and v(t, x) solves the one-dimensional equation with nu = mu/2 and data
v(q, x) = u(q, x, x). The first two lambda-derivatives are carried along
through the tilted transition kernels.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from mixtures.conf import get_setting
from parisi.solvers import GridParams, gauss_hermite

from .terminal import terminal_grid

logger = logging.getLogger(__name__)

QUAD_ORDER_2D = 32


@dataclass(frozen=True)
class DegeneratePath:
    """Overlap path with Q_t = [[t, min(t, q)], [min(t, q), t]]"""

    q: float

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"The degenerate path needs q in [0, 1], got {self.q}")

    def overlap_matrix(self, t):
        off = min(t, self.q)
        return np.array([[t, off], [off, t]])

    def diffusion_matrix(self, spec, t):
        """A_t = xi''(t) times all-ones before q and times the identity after"""
        if t <= self.q:
            return spec.xi(t, 2) * np.ones((2, 2))
        return spec.xi(t, 2) * np.eye(2)


@dataclass(frozen=True)
class TiltedMeasure:
    """nu(t) = mu(t)/2 for t < q and mu(t) for t >= q"""

    base: object
    q: float

    def cdf(self, t):
        value = self.base.cdf(t)
        return 0.5 * value if t < self.q else value

    def pieces(self, lo, hi):
        """Constancy intervals of nu inside [lo, hi] as (lo, hi, nu)"""
        cuts = [lo] + [float(a) for a in self.base.atoms if lo < a < hi]
        if lo < self.q < hi:
            cuts.append(self.q)
        cuts = sorted(set(cuts)) + [hi]
        return [(a, b, self.cdf(a)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def grid_2d(**overrides):
    """Grid parameters for the two-dimensional solves"""
    params = {'n_points': get_setting('GRID_2D_POINTS'), 'quad_order': QUAD_ORDER_2D}
    params.update(overrides)
    return replace(GridParams.production(), **params)


def _interpolate(x, field, points, extend):
    """field along its last axis at points of shape (n, k); linear past the ends when extend"""
    inside = np.clip(points, x[0], x[-1])
    values = CubicSpline(x, field, axis=-1)(inside)
    if extend:
        dx = x[1] - x[0]
        right = ((field[..., -1] - field[..., -2]) / dx)[..., None, None]
        left = ((field[..., 1] - field[..., 0]) / dx)[..., None, None]
        values = values + np.where(points > x[-1], right * (points - x[-1]), 0.0)
        values = values + np.where(points < x[0], left * (points - x[0]), 0.0)
    return values


def tilted_axis_step(x, fields, m, variance, nodes, weights):
    """
    One step of u(t) = (1/m) log E exp(m u(t+, x + a Z)) along the last axis,
    with first and second lambda-derivatives carried by the tilted kernel.
    """
    u, du, d2u = fields
    if variance <= 0.0:
        return fields
    points = x[:, None] + math.sqrt(variance) * nodes[None, :]
    values = _interpolate(x, u, points, extend=True)
    values_d = _interpolate(x, du, points, extend=False)
    values_d2 = _interpolate(x, d2u, points, extend=False)
    log_w = np.log(weights)
    if m > 0.0:
        new_u = logsumexp(m * values + log_w, axis=-1) / m
        tilt = np.exp(m * values + log_w - m * new_u[..., None])
    else:
        tilt = np.broadcast_to(weights, values.shape)
        new_u = np.sum(tilt * values, axis=-1)
    tilt = tilt / tilt.sum(axis=-1, keepdims=True)
    new_du = np.sum(tilt * values_d, axis=-1)
    new_d2u = np.sum(tilt * values_d2, axis=-1) + m * (np.sum(tilt * values_d ** 2, axis=-1) - new_du ** 2)
    return new_u, new_du, new_d2u


def _plane_step(x, fields, m, variance, nodes, weights):
    """Independent Gaussian moves in both coordinates, one axis at a time"""
    fields = tilted_axis_step(x, fields, m, variance, nodes, weights)
    fields = tuple(f.T for f in fields)
    fields = tilted_axis_step(x, fields, m, variance, nodes, weights)
    return tuple(np.ascontiguousarray(f.T) for f in fields)


def _n_inner(variance, max_std):
    return max(1, math.ceil(math.sqrt(max(variance, 0.0)) / max_std))


class Solution2D:
    """u on [q, 1] at the constancy breakpoints and v on [0, q], with lambda-derivatives"""

    def __init__(self, spec, measure, q, lam, x_grid, grid, u_times, u_fields):
        self.spec = spec
        self.measure = measure
        self.q = q
        self.lam = lam
        self.x_grid = x_grid
        self.grid = grid
        self.u_times = u_times
        self.u, self.u_lambda, self.u_lambda2 = u_fields
        self.v_times = None
        self.v = self.v_lambda = self.v_lambda2 = None

    def __repr__(self):
        return f"Solution2D(q={self.q:g}, lam={self.lam:g}, points={self.x_grid.size}, measure={self.measure!r})"

    def u_index(self, t):
        for j, s in enumerate(self.u_times):
            if abs(s - t) <= 1e-14:
                return j
        raise KeyError(f"No stored u slice at t={t}")

    def diagonal(self, t):
        """(u, d_lam u, d_lam^2 u) at (t, x, x)"""
        j = self.u_index(t)
        return tuple(np.diagonal(f[j]).copy() for f in (self.u, self.u_lambda, self.u_lambda2))

    @property
    def has_v(self):
        return self.v is not None

    def v_at_start(self, x=None):
        """v(0, x), d_lam v(0, x) and d_lam^2 v(0, x), by default at x = h"""
        if not self.has_v:
            raise ValueError("v has not been solved yet")
        x = self.spec.h if x is None else x
        return tuple(float(CubicSpline(self.x_grid, f[0])(x)) for f in (self.v, self.v_lambda, self.v_lambda2))


def solve_u2d(spec, mu, q, lam, grid=None):
    """Backward solve of the two-replica equation on [q, 1] for terminal f_lam"""
    DegeneratePath(q)
    grid = grid or grid_2d()
    x = grid.x_grid(spec)
    nodes, weights = gauss_hermite(grid.quad_order)
    nu = TiltedMeasure(mu, q)
    pieces = nu.pieces(q, 1.0)
    xi1 = spec.xi(1.0, 1)

    terminal = terminal_grid(lam, x)
    fields = terminal
    times = [1.0]
    stored = [fields]
    for t_lo, t_hi, m in reversed(pieces):
        if m == 1.0 and t_hi == 1.0:
            # e^u solves the heat equation there: each axis contributes (xi'(1) - xi'(t)) / 2
            shift = xi1 - spec.xi(t_lo, 1)
            fields = (terminal[0] + shift, terminal[1], terminal[2])
        else:
            variance = spec.xi(t_hi, 1) - spec.xi(t_lo, 1)
            n_inner = _n_inner(variance, grid.max_step_std)
            for _ in range(n_inner):
                fields = _plane_step(x, fields, m, variance / n_inner, nodes, weights)
        times.append(t_lo)
        stored.append(fields)
    times = times[::-1]
    stored = stored[::-1]
    u_fields = tuple(np.stack([s[i] for s in stored]) for i in range(3))
    logger.debug("Two-replica solve on [%g, 1] at lam=%g: %d slices", q, lam, len(times))
    return Solution2D(spec, mu, q, lam, x, grid, np.asarray(times), u_fields)


def solve_v(spec, mu, q, u_solution):
    """Backward solve on [0, q] along the diagonal with nu = mu/2 and v(q, x) = u(q, x, x)"""
    if u_solution.q != q or u_solution.measure != mu:
        raise ValueError("The two-replica solution belongs to a different (mu, q)")
    x = u_solution.x_grid
    grid = u_solution.grid
    nodes, weights = gauss_hermite(grid.quad_order)
    fields = u_solution.diagonal(q)
    times = [q]
    stored = [fields]
    for t_lo, t_hi, m in reversed(TiltedMeasure(mu, q).pieces(0.0, q)):
        variance = spec.xi(t_hi, 1) - spec.xi(t_lo, 1)
        n_inner = _n_inner(variance, grid.max_step_std)
        for _ in range(n_inner):
            fields = tilted_axis_step(x, fields, m, variance / n_inner, nodes, weights)
        times.append(t_lo)
        stored.append(fields)
    u_solution.v_times = np.asarray(times[::-1])
    u_solution.v, u_solution.v_lambda, u_solution.v_lambda2 = (
        np.stack([s[i] for s in stored[::-1]]) for i in range(3)
    )
    return u_solution


def solve_gt(spec, mu, q, lam, grid=None):
    """u on [q, 1] followed by v on [0, q]"""
    return solve_v(spec, mu, q, solve_u2d(spec, mu, q, lam, grid))
