"""
Solvers for the Parisi PDE
    d_t phi + (xi''/2) (phi_xx + m(t) phi_x^2) = 0,   phi(1, x) = log cosh x
for atomic measures, by the exponential-linearization recursion and by an
independent finite-difference scheme.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from mixtures.conf import get_setting
from mixtures.exceptions import ConvergenceError, GridError, InvariantViolation

logger = logging.getLogger(__name__)

METHODS = ('recursion', 'finite_difference')
MIN_QUADRATURE_ORDER = 32


def log_cosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)


def sech2(x):
    return 1.0 / np.cosh(np.clip(x, -350.0, 350.0)) ** 2


def gauss_hermite(order):
    """Nodes and weights of E f(Z), Z standard normal"""
    nodes, weights = hermegauss(order)
    return nodes, weights / weights.sum()


def default_half_width(spec):
    return 8.0 + abs(spec.h) + 4.0 * math.sqrt(max(spec.xi(1.0, 1), 0.0))


@dataclass(frozen=True)
class GridParams:
    """Spatial grid, quadrature order and stored substeps per constancy interval"""

    n_points: int = 2048
    quad_order: int = 64
    substeps: int = 32
    half_width: float = None
    max_step_std: float = 1.0
    step_ratio: float = 0.25

    @classmethod
    def production(cls, **overrides):
        params = cls(
            n_points=get_setting('PDE_GRID_POINTS'),
            quad_order=get_setting('PDE_QUADRATURE_ORDER'),
            substeps=get_setting('PDE_TIME_SUBSTEPS'),
            max_step_std=get_setting('PDE_MAX_STEP_STD'),
            step_ratio=get_setting('FD_STEP_RATIO'),
        )
        return replace(params, **overrides)

    @classmethod
    def coarse(cls, **overrides):
        """Cheap grid for optimizer inner loops"""
        params = {'n_points': 512, 'quad_order': 32, 'substeps': 4}
        params.update(overrides)
        return replace(cls.production(), **params)

    def refined(self):
        """Halve dx (same half-width) and the stored time steps"""
        return replace(self, n_points=2 * self.n_points - 1, substeps=2 * self.substeps)

    def x_grid(self, spec):
        half_width = self.half_width if self.half_width is not None else default_half_width(spec)
        if half_width < 8.0 + abs(spec.h):
            raise GridError(f"Half-width L={half_width:g} is below 8 + |h| = {8.0 + abs(spec.h):g}")
        if self.n_points < 16:
            raise ValueError(f"n_points must be >= 16, got {self.n_points}")
        return np.linspace(-half_width, half_width, self.n_points)

    def as_dict(self):
        return {
            'n_points': self.n_points,
            'quad_order': self.quad_order,
            'substeps': self.substeps,
            'half_width': self.half_width,
            'max_step_std': self.max_step_std,
            'step_ratio': self.step_ratio,
        }


def time_mesh(nu, substeps):
    """
    Stored times from 0 to 1 and the constant value of m on each interval
    [times[k], times[k+1]). Every constancy interval of nu is split into
    `substeps` equal parts.
    """
    times = [0.0]
    m_values = []
    for lo, hi, m in nu.pieces():
        inner = np.linspace(lo, hi, substeps + 1)[1:]
        times.extend(inner.tolist())
        m_values.extend([m] * substeps)
    return np.asarray(times), np.asarray(m_values)


def evaluate_slice(x, slice_, points):
    """phi, phi_x, phi_xx of a slice at arbitrary points, extended linearly past the grid"""
    phi, phi_x, phi_xx = slice_
    inside = np.clip(points, x[0], x[-1])
    value = CubicSpline(x, phi)(inside)
    value = value + np.where(points > x[-1], phi_x[-1] * (points - x[-1]), 0.0)
    value = value + np.where(points < x[0], phi_x[0] * (points - x[0]), 0.0)
    return value, CubicSpline(x, phi_x)(inside), CubicSpline(x, phi_xx)(inside)


def centered_derivatives(phi, dx):
    phi_x = np.gradient(phi, dx, edge_order=2)
    phi_xx = np.empty_like(phi)
    phi_xx[1:-1] = (phi[2:] - 2.0 * phi[1:-1] + phi[:-2]) / dx ** 2
    phi_xx[0] = phi_xx[1]
    phi_xx[-1] = phi_xx[-2]
    return phi_x, phi_xx


def hopf_cole_step(x, slice_, m, variance, nodes, weights, derivatives='tilted'):
    """
    phi(t) = (1/m) log E exp(m phi(t+, x + a Z)) with a^2 = variance; m = 0 is
    the plain Gaussian average. Derivatives follow from the tilted measure
    with weights proportional to w_i exp(m phi(t+, x + a z_i)).
    """
    if variance <= 0.0:
        return slice_
    a = math.sqrt(variance)
    points = x[None, :] + a * nodes[:, None]
    values, values_x, values_xx = evaluate_slice(x, slice_, points)
    log_w = np.log(weights)[:, None]
    if m > 0.0:
        phi = logsumexp(m * values + log_w, axis=0) / m
        tilt = np.exp(m * values + log_w - m * phi[None, :])
    else:
        tilt = np.broadcast_to(weights[:, None], values.shape)
        phi = np.sum(tilt * values, axis=0)
    tilt = tilt / tilt.sum(axis=0, keepdims=True)
    if derivatives == 'centered':
        phi_x, phi_xx = centered_derivatives(phi, x[1] - x[0])
        return phi, phi_x, phi_xx
    phi_x = np.sum(tilt * values_x, axis=0)
    phi_xx = np.sum(tilt * values_xx, axis=0) + m * (np.sum(tilt * values_x ** 2, axis=0) - phi_x ** 2)
    return phi, phi_x, phi_xx


class ParisiSolution:
    """Gridded phi, phi_x, phi_xx of the Parisi PDE at the stored time knots"""

    def __init__(self, spec, measure, x_grid, time_knots, m_values, phi, phi_x, phi_xx,
                 method, grid):
        if method not in METHODS:
            raise ValueError(f"Unknown method {method!r}")
        self.spec = spec
        self.measure = measure
        self.x_grid = x_grid
        self.time_knots = time_knots
        self.m_values = m_values
        self.phi = phi
        self.phi_x = phi_x
        self.phi_xx = phi_xx
        self.method = method
        self.grid = grid

    def __repr__(self):
        return (
            f"ParisiSolution(method={self.method}, knots={self.time_knots.size}, "
            f"points={self.x_grid.size}, measure={self.measure!r})"
        )

    @property
    def dx(self):
        return float(self.x_grid[1] - self.x_grid[0])

    @property
    def half_width(self):
        return float(self.x_grid[-1])

    def m_at(self, t):
        return self.measure.cdf(t)

    def knot_index(self, t):
        """Index of a stored knot equal to t, or None"""
        k = int(np.searchsorted(self.time_knots, t))
        for j in (k - 1, k):
            if 0 <= j < self.time_knots.size and abs(self.time_knots[j] - t) <= 1e-14:
                return j
        return None

    def slice_at(self, t):
        """(phi, phi_x, phi_xx) at time t, by an exact partial step between knots"""
        if t < 0.0 or t > 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        j = self.knot_index(t)
        if j is not None:
            return self.phi[j], self.phi_x[j], self.phi_xx[j]
        upper = int(np.searchsorted(self.time_knots, t, side='right'))
        m = float(self.m_values[upper - 1])
        variance = self.spec.xi(self.time_knots[upper], 1) - self.spec.xi(t, 1)
        nodes, weights = gauss_hermite(self.grid.quad_order)
        slice_ = (self.phi[upper], self.phi_x[upper], self.phi_xx[upper])
        n_inner = max(1, math.ceil(math.sqrt(max(variance, 0.0)) / self.grid.max_step_std))
        for _ in range(n_inner):
            slice_ = hopf_cole_step(self.x_grid, slice_, m, variance / n_inner, nodes, weights)
        return slice_

    def evaluate(self, t, x):
        """phi, phi_x, phi_xx at time t and points x"""
        return evaluate_slice(self.x_grid, self.slice_at(t), np.asarray(x, dtype=float))

    def value(self, x=None):
        """phi(0, x), by default at x = h"""
        x = self.spec.h if x is None else x
        phi, _, _ = evaluate_slice(self.x_grid, self.slice_at(0.0), np.asarray(x, dtype=float))
        return float(phi) if np.ndim(phi) == 0 else phi

    def check_bounds(self, tol=None):
        """0 < phi_xx < 1 and |phi_x| < 1 at every stored node, up to tol"""
        tol = get_setting('PDE_BOUND_TOL') if tol is None else tol
        worst = {
            'min_phi_xx': float(self.phi_xx.min()),
            'max_phi_xx': float(self.phi_xx.max()),
            'max_abs_phi_x': float(np.abs(self.phi_x).max()),
        }
        if worst['min_phi_xx'] < -tol or worst['max_phi_xx'] > 1.0 + tol or worst['max_abs_phi_x'] > 1.0 + tol:
            raise InvariantViolation(
                f"Parisi PDE bounds violated ({self.method}): {worst}", details=worst,
            )
        return worst

    def check_boundary(self, tol=None):
        """phi_x must reach -1 and +1 at the ends of the grid"""
        tol = get_setting('PDE_BOUNDARY_TOL') if tol is None else tol
        left = np.abs(self.phi_x[:, 0] + 1.0).max()
        right = np.abs(self.phi_x[:, -1] - 1.0).max()
        if self.method == 'finite_difference':
            # phi_x is pinned at +-L by the Neumann condition; the curvature there is not
            left = max(left, np.abs(self.phi_xx[:, 0]).max())
            right = max(right, np.abs(self.phi_xx[:, -1]).max())
        if max(left, right) > tol:
            raise GridError(
                f"Boundary influence detected: |phi_x(+-L)| differs from 1 by {max(left, right):.3e} "
                f"(L={self.half_width:g}); enlarge the grid half-width"
            )

    def write_grid(self, path):
        """Delimited-text grid dump with a commented header"""
        with open(path, 'w', newline='') as handle:
            handle.write(f"# method={self.method}\n")
            handle.write("# knots=" + ','.join(f"{q:.12g}" for q in self.measure.knots()) + "\n")
            handle.write(
                f"# grid=-{self.half_width:.12g},{self.half_width:.12g},{self.x_grid.size}\n"
            )
            writer = csv.writer(handle)
            writer.writerow(['t', 'x', 'phi', 'phi_x', 'phi_xx'])
            for k, t in enumerate(self.time_knots):
                for i, x in enumerate(self.x_grid):
                    writer.writerow([
                        f"{t:.12g}", f"{x:.12g}", f"{self.phi[k, i]:.15g}",
                        f"{self.phi_x[k, i]:.15g}", f"{self.phi_xx[k, i]:.15g}",
                    ])
        return path


def _validate_inputs(nu, grid):
    if not hasattr(nu, 'pieces'):
        raise ValueError("The Parisi PDE solvers accept atomic measures only")
    if grid.quad_order < MIN_QUADRATURE_ORDER:
        raise ValueError(f"Quadrature order must be >= {MIN_QUADRATURE_ORDER}, got {grid.quad_order}")


def _allocate(x, n_times):
    phi = np.empty((n_times, x.size))
    phi_x = np.empty_like(phi)
    phi_xx = np.empty_like(phi)
    phi[-1] = log_cosh(x)
    phi_x[-1] = np.tanh(x)
    phi_xx[-1] = sech2(x)
    return phi, phi_x, phi_xx


def solve_recursion(spec, nu, grid=None, keep='all', derivatives='tilted'):
    """
    Backward exponential-linearization recursion over the constancy intervals
    of m. With keep='knots' only the breakpoints {0, atoms, 1} are stored.
    """
    grid = grid or GridParams.production()
    _validate_inputs(nu, grid)
    if derivatives not in ('tilted', 'centered'):
        raise ValueError(f"Unknown derivative mode {derivatives!r}")
    x = grid.x_grid(spec)
    nodes, weights = gauss_hermite(grid.quad_order)
    times, m_values = time_mesh(nu, grid.substeps if keep == 'all' else 1)
    phi, phi_x, phi_xx = _allocate(x, times.size)
    xi1 = spec.xi(1.0, 1)

    for k in range(times.size - 2, -1, -1):
        t_lo, t_hi, m = times[k], times[k + 1], float(m_values[k])
        if m == 1.0:
            # m = 1 on [q_max, 1): the Cole-Hopf transform is a heat flow of cosh
            shift = 0.5 * (xi1 - spec.xi(t_lo, 1))
            phi[k] = log_cosh(x) + shift
            phi_x[k] = np.tanh(x)
            phi_xx[k] = sech2(x)
            continue
        variance = spec.xi(t_hi, 1) - spec.xi(t_lo, 1)
        n_inner = max(1, math.ceil(math.sqrt(max(variance, 0.0)) / grid.max_step_std))
        slice_ = (phi[k + 1], phi_x[k + 1], phi_xx[k + 1])
        for _ in range(n_inner):
            slice_ = hopf_cole_step(x, slice_, m, variance / n_inner, nodes, weights, derivatives)
        phi[k], phi_x[k], phi_xx[k] = slice_

    solution = ParisiSolution(spec, nu, x, times, m_values, phi, phi_x, phi_xx, 'recursion', grid)
    solution.check_boundary()
    logger.debug("Recursion solve %r: phi(0,h)=%.10f", nu, solution.value())
    return solution


def _neumann_laplacian(u, dx):
    """A u + c: second difference with ghost points fixing u_x(-L) = -1, u_x(L) = 1"""
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dx ** 2
    out[0] = 2.0 * (u[1] - u[0]) / dx ** 2 + 2.0 / dx
    out[-1] = 2.0 * (u[-2] - u[-1]) / dx ** 2 + 2.0 / dx
    return out


class _CrankNicolson:
    """
    One step of du/ds = (A u + c)/2 + (m/2) N:
        (I - r A) u_new = u_old + r (A u_old + c) + r c + (ds/2) m N,  r = ds/4
    """

    def __init__(self, n, dx, ds):
        self.dx = dx
        self.ds = ds
        self.r = ds / 4.0
        coef = self.r / dx ** 2
        ab = np.zeros((3, n))
        ab[0, 1:] = -coef
        ab[1, :] = 1.0 + 2.0 * coef
        ab[2, :-1] = -coef
        ab[0, 1] = -2.0 * coef
        ab[2, n - 2] = -2.0 * coef
        self.ab = ab

    def step(self, u, m, nonlinear):
        rhs = u + self.r * _neumann_laplacian(u, self.dx) + 0.5 * self.ds * m * nonlinear
        rhs[0] += 2.0 * self.r / self.dx
        rhs[-1] += 2.0 * self.r / self.dx
        return solve_banded((1, 1), self.ab, rhs)


def _neumann_gradient(u, dx):
    grad = np.empty_like(u)
    grad[1:-1] = (u[2:] - u[:-2]) / (2.0 * dx)
    grad[0] = -1.0
    grad[-1] = 1.0
    return grad


def _march(spec, x, times, m_values, ds_target):
    """Backward sweep of the Crank-Nicolson / Adams-Bashforth scheme over the stored times"""
    n = x.size
    dx = float(x[1] - x[0])
    phi, phi_x, phi_xx = _allocate(x, times.size)
    current = phi[-1].copy()
    previous_nonlinear = None
    previous_ds = None
    n_steps_total = 0
    for k in range(times.size - 2, -1, -1):
        m = float(m_values[k])
        span = spec.xi(times[k + 1], 1) - spec.xi(times[k], 1)
        n_steps = math.ceil(span / ds_target) if span > 0.0 else 0
        if n_steps:
            ds = span / n_steps
            scheme = _CrankNicolson(n, dx, ds)
            for _ in range(n_steps):
                nonlinear = _neumann_gradient(current, dx) ** 2
                if previous_nonlinear is None:
                    extrapolated = nonlinear
                else:
                    ratio = ds / previous_ds
                    extrapolated = (1.0 + 0.5 * ratio) * nonlinear - 0.5 * ratio * previous_nonlinear
                current = scheme.step(current, m, extrapolated)
                previous_nonlinear = nonlinear
                previous_ds = ds
            n_steps_total += n_steps
        phi[k] = current
        phi_x[k] = _neumann_gradient(current, dx)
        phi_xx[k] = _neumann_laplacian(current, dx)
        if not np.all(np.isfinite(current)):
            raise GridError("Finite-difference solve diverged")
    return phi, phi_x, phi_xx, n_steps_total


def solve_fd(spec, nu, grid=None, keep='all', halving_tol=None):
    """
    Semi-implicit finite differences in s = xi'(t), where the equation reads
    d_s phi + (phi_xx + m phi_x^2)/2 = 0. Diffusion is Crank-Nicolson, the
    nonlinear term is extrapolated with second-order Adams-Bashforth.

    The sweep is repeated over the breakpoints with half the step; phi(0, h)
    of the two sweeps must agree within `halving_tol` (FD_HALVING_TOL).
    """
    grid = grid or GridParams.production()
    _validate_inputs(nu, grid)
    halving_tol = get_setting('FD_HALVING_TOL') if halving_tol is None else halving_tol
    x = grid.x_grid(spec)
    dx = float(x[1] - x[0])
    ds_target = grid.step_ratio * dx
    if ds_target > dx or ds_target > 0.25:
        raise GridError(f"Step ds={ds_target:.3g} violates the stability constraint (dx={dx:.3g})")
    times, m_values = time_mesh(nu, grid.substeps if keep == 'all' else 1)
    phi, phi_x, phi_xx, n_steps_total = _march(spec, x, times, m_values, ds_target)
    solution = ParisiSolution(spec, nu, x, times, m_values, phi, phi_x, phi_xx, 'finite_difference', grid)
    solution.check_boundary()

    knots, knot_m = time_mesh(nu, 1)
    halved = ParisiSolution(
        spec, nu, x, knots, knot_m, *_march(spec, x, knots, knot_m, 0.5 * ds_target)[:3],
        'finite_difference', grid,
    )
    value, halved_value = solution.value(), halved.value()
    if abs(value - halved_value) > halving_tol:
        raise ConvergenceError(
            f"Step-halving check failed: phi(0,h) moved from {value:.10f} to {halved_value:.10f} "
            f"(tolerance {halving_tol:g}); refine the grid"
        )
    logger.debug(
        "Finite-difference solve %r: %d steps, phi(0,h)=%.10f, halving change %.2e",
        nu, n_steps_total, value, abs(value - halved_value),
    )
    return solution


def solve(spec, nu, grid=None, method='recursion', **kwargs):
    if method == 'recursion':
        return solve_recursion(spec, nu, grid, **kwargs)
    if method == 'finite_difference':
        return solve_fd(spec, nu, grid, **kwargs)
    raise ValueError(f"Unknown method {method!r}")
