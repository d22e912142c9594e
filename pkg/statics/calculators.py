"""
Calculator module for the Ising Parisi functional
Free energies here omit the constant log 2 of the Parisi formula.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from parisi.measures import AtomicMeasure
from parisi.solvers import GridParams, solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParisiValue:
    value: float
    phi0: float
    correction: float
    measure: AtomicMeasure = None

    def as_dict(self):
        return {'value': self.value, 'phi0': self.phi0, 'correction': self.correction}


class ParisiCalculator:
    """Evaluation of P_I(nu) = phi_nu(0, h) - (1/2) int xi''(s) s m(s) ds"""

    @staticmethod
    def correction(spec, nu):
        """Closed form of (1/2) int_0^1 xi''(s) s m(s) ds using d/ds (s xi' - xi) = s xi''"""
        total = 0.0
        for lo, hi, m in nu.pieces():
            if m == 0.0:
                continue
            upper = hi * spec.xi(hi, 1) - spec.xi(hi)
            lower = lo * spec.xi(lo, 1) - spec.xi(lo)
            total += m * (upper - lower)
        return 0.5 * total

    @staticmethod
    def parisi_functional(spec, nu, grid=None, method='recursion', solution=None):
        """P_I(nu) with phi_nu(0, h) from a Parisi PDE solve"""
        if solution is None:
            solution = solve(spec, nu, grid or GridParams.production(), method=method, keep='knots')
        phi0 = solution.value()
        correction = ParisiCalculator.correction(spec, nu)
        return ParisiValue(phi0 - correction, phi0, correction, nu)

    @staticmethod
    def value(spec, nu, grid=None):
        """Scalar P_I(nu), the optimizer objective"""
        return ParisiCalculator.parisi_functional(spec, nu, grid).value

    @staticmethod
    def free_energy_beta_derivative(spec, report):
        """F'(beta) = beta * sum_i w_i (xi0(1) - xi0(q_i))"""
        if not spec.has_beta:
            raise ValueError("F'(beta) needs a mixture given as beta^2 * xi0")
        mu = getattr(report, 'minimizer', report)
        return spec.beta * float(np.dot(mu.masses, spec.xi0(1.0) - spec.xi0(mu.atoms)))

    @staticmethod
    def scan_single_atoms(spec, q_grid, grid=None):
        """P_I(delta_q) on a grid of q"""
        grid = grid or GridParams.coarse()
        return np.array([ParisiCalculator.value(spec, AtomicMeasure.delta(q), grid) for q in q_grid])

    @staticmethod
    def best_single_atom(spec, grid=None, n_scan=21):
        """Minimizer over {delta_q}: scan then bounded refinement around the best point"""
        grid = grid or GridParams.coarse()
        q_grid = np.linspace(0.0, 1.0, n_scan)
        values = ParisiCalculator.scan_single_atoms(spec, q_grid, grid)
        best = int(np.argmin(values))
        lo = q_grid[max(best - 1, 0)]
        hi = q_grid[min(best + 1, n_scan - 1)]
        result = minimize_scalar(
            lambda q: ParisiCalculator.value(spec, AtomicMeasure.delta(q), grid),
            bounds=(lo, hi), method='bounded', options={'xatol': 1e-6},
        )
        if result.fun < values[best]:
            return float(result.x), float(result.fun)
        return float(q_grid[best]), float(values[best])
