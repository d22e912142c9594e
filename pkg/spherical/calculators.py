"""
Calculator module for spherical mixtures
Closed-form Crisanti-Sommers and spherical Parisi functionals for atomic
measures, the spherical replicon and the two-replica functional P(lam, q).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq, minimize_scalar

from mixtures.conf import get_setting

logger = logging.getLogger(__name__)

B_MARGIN = 1e-9


class MeasureProfile:
    """
    Piecewise data of psi(t) = int_t^1 xi''(s) nu(s) ds and
    phi(s) = int_s^1 nu(u) du for an atomic nu, where nu(s) = nu([0, s]).
    """

    def __init__(self, spec, nu):
        self.spec = spec
        self.nu = nu
        pieces = nu.pieces()
        self.lo = np.array([p[0] for p in pieces])
        self.hi = np.array([p[1] for p in pieces])
        self.m = np.array([p[2] for p in pieces])
        n = len(pieces)
        self.psi_hi = np.zeros(n)
        self.phi_hi = np.zeros(n)
        psi = phi = 0.0
        for j in range(n - 1, -1, -1):
            self.psi_hi[j] = psi
            self.phi_hi[j] = phi
            psi += self.m[j] * (spec.xi(self.hi[j], 1) - spec.xi(self.lo[j], 1))
            phi += self.m[j] * (self.hi[j] - self.lo[j])

    def piece_index(self, t):
        return int(np.clip(np.searchsorted(self.lo, t, side='right') - 1, 0, self.lo.size - 1))

    def psi(self, t):
        j = self.piece_index(t)
        return float(self.psi_hi[j] + self.m[j] * (self.spec.xi(self.hi[j], 1) - self.spec.xi(t, 1)))

    def phi(self, s):
        j = self.piece_index(s)
        return float(self.phi_hi[j] + self.m[j] * (self.hi[j] - s))

    @property
    def q_ea(self):
        return self.nu.q_max

    def shifted_integral(self, c, n, lo=0.0, hi=1.0):
        """int_lo^hi xi''(t) (c - psi(t))^-n dt for n = 1, 2, 3, exact per piece"""
        if n not in (1, 2, 3):
            raise ValueError(f"n must be 1, 2 or 3, got {n}")
        total = 0.0
        for a, b, m in zip(self.lo, self.hi, self.m):
            a, b = max(a, lo), min(b, hi)
            if b <= a:
                continue
            width = self.spec.xi(b, 1) - self.spec.xi(a, 1)
            d_lo = c - self.psi(a)
            d_hi = d_lo + m * width
            if d_lo <= 0.0:
                return math.inf
            if n == 1:
                x = m * width / d_lo
                total += width / d_lo * (math.log1p(x) / x if x != 0.0 else 1.0)
            elif n == 2:
                total += width / (d_lo * d_hi)
            else:
                total += width * (d_lo + d_hi) / (2.0 * d_lo ** 2 * d_hi ** 2)
        return total

    def t_xi_integral(self):
        """int_0^1 t xi''(t) nu(t) dt, using d/dt (t xi' - xi) = t xi''"""
        spec = self.spec
        upper = self.hi * spec.xi(self.hi, 1) - spec.xi(self.hi)
        lower = self.lo * spec.xi(self.lo, 1) - spec.xi(self.lo)
        return float(np.sum(self.m * (upper - lower)))


@dataclass(frozen=True)
class SphericalAnsatz:
    nu: object
    b: float

    def profile(self, spec):
        return MeasureProfile(spec, self.nu)

    def is_admissible(self, spec):
        return self.b >= 1.0 and self.b >= self.profile(spec).psi(0.0)

    def as_dict(self):
        return {'nu': self.nu.as_dict(), 'b': self.b}


def cs_functional(spec, nu):
    """C(nu) = (1/2)(int xi'' phi + int (1/phi - 1/(1 - s)) ds + h^2 phi(0))"""
    profile = MeasureProfile(spec, nu)
    if nu.q_max >= 1.0:
        raise ValueError("phi_nu vanishes before s = 1 when nu has an atom at 1")
    # int xi'' phi = -xi'(0) phi(0) + int xi' nu, by parts
    xi_phi = -spec.xi(0.0, 1) * profile.phi(0.0)
    log_part = 0.0
    for a, b, m in zip(profile.lo, profile.hi, profile.m):
        xi_phi += m * (spec.xi(b) - spec.xi(a))
        if m == 1.0:
            # phi(s) = 1 - s there and the integrand vanishes
            continue
        phi_a, phi_b = profile.phi(a), profile.phi(b)
        if m > 0.0:
            inverse = math.log(phi_a / phi_b) / m
        else:
            inverse = (b - a) / phi_a
        log_part += inverse - math.log((1.0 - a) / (1.0 - b))
    return 0.5 * (xi_phi + log_part + spec.h ** 2 * profile.phi(0.0))


def sph_parisi(spec, ansatz):
    """P_S(nu, b); +inf outside the admissible set"""
    profile = ansatz.profile(spec)
    b = ansatz.b
    gap = b - profile.psi(0.0)
    if b < 1.0 or gap < 0.0:
        return math.inf
    if gap == 0.0:
        return math.inf
    integral = profile.shifted_integral(b, 1)
    return spec.h ** 2 / gap + integral + b - 1.0 - math.log(b) - profile.t_xi_integral()


def sph_parisi_b_derivative(spec, profile, b):
    """d/db P_S = -h^2/(b - psi(0))^2 - int xi''/(b - psi)^2 + 1 - 1/b"""
    gap = b - profile.psi(0.0)
    return -spec.h ** 2 / gap ** 2 - profile.shifted_integral(b, 2) + 1.0 - 1.0 / b


def b_from_optimality(spec, nu):
    """b = xi'(1) - xi'(q_EA) + 1/(1 - q_EA)"""
    q_ea = nu.q_max
    if q_ea >= 1.0:
        return math.inf
    return spec.xi(1.0, 1) - spec.xi(q_ea, 1) + 1.0 / (1.0 - q_ea)


def optimal_b(spec, nu):
    """Minimizer of the strictly convex map b -> P_S(nu, b)"""
    profile = MeasureProfile(spec, nu)
    lower = max(1.0, profile.psi(0.0)) + B_MARGIN
    upper = spec.xi(1.0, 1) + 2.0 + 1.0 / max(1.0 - nu.q_max, 1e-12)
    if sph_parisi_b_derivative(spec, profile, lower) >= 0.0:
        return lower
    while sph_parisi_b_derivative(spec, profile, upper) <= 0.0:
        upper *= 2.0
    return brentq(lambda b: sph_parisi_b_derivative(spec, profile, b), lower, upper, xtol=1e-14)


def replicon_sph(spec, nu, q):
    """Lambda_R(q, nu) = 1/phi_nu(q)^2 - xi''(q)"""
    value = MeasureProfile(spec, nu).phi(q)
    if value <= 0.0:
        raise ValueError(f"phi_nu({q}) = 0, the replicon is undefined")
    return 1.0 / value ** 2 - spec.xi(q, 2)


@dataclass(frozen=True)
class SphericalGTValue:
    q: float
    lam: float
    value: float
    d_lambda: float
    d2_lambda: float

    def as_dict(self):
        return {
            'q': self.q,
            'lambda': self.lam,
            'value': self.value,
            'd_lambda': self.d_lambda,
            'd2_lambda': self.d2_lambda,
        }


def lambda_window(spec, ansatz):
    """Largest |lam| keeping both shifted denominators positive"""
    return ansatz.b - ansatz.profile(spec).psi(0.0)


def gt_value_sph(spec, ansatz, lam, q):
    """
    Two-replica functional on the degenerate path

        P(lam, q) = log(b^2/(b^2 - lam^2)) + int_0^q xi''/(b - lam - psi)
                    + (1/2) int_q^1 xi'' (1/(b - lam - psi) + 1/(b + lam - psi))
                    - lam q + b - 1 - log b - int t xi'' mu + h^2/(b - lam - psi(0))

    with P(0, q) = P_S(mu, b).
    """
    profile = ansatz.profile(spec)
    b = ansatz.b
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    gap = b - profile.psi(0.0)
    if gap - abs(lam) <= 0.0:
        raise ValueError(f"|lam|={abs(lam):g} is not below b - psi(0) = {gap:g}")
    minus, plus = b - lam, b + lam
    h2 = spec.h ** 2

    value = (
        math.log(b * b / (b * b - lam * lam))
        + profile.shifted_integral(minus, 1, 0.0, q)
        + 0.5 * (profile.shifted_integral(minus, 1, q, 1.0) + profile.shifted_integral(plus, 1, q, 1.0))
        - lam * q + b - 1.0 - math.log(b) - profile.t_xi_integral()
        + h2 / (gap - lam)
    )
    d_lambda = (
        2.0 * lam / (b * b - lam * lam)
        + profile.shifted_integral(minus, 2, 0.0, q)
        + 0.5 * (profile.shifted_integral(minus, 2, q, 1.0) - profile.shifted_integral(plus, 2, q, 1.0))
        - q + h2 / (gap - lam) ** 2
    )
    d2_lambda = (
        2.0 * (b * b + lam * lam) / (b * b - lam * lam) ** 2
        + 2.0 * profile.shifted_integral(minus, 3, 0.0, q)
        + profile.shifted_integral(minus, 3, q, 1.0) + profile.shifted_integral(plus, 3, q, 1.0)
        + 2.0 * h2 / (gap - lam) ** 3
    )
    return SphericalGTValue(float(q), float(lam), value, d_lambda, d2_lambda)


def mixed_partial_sph(spec, ansatz, q):
    """d_q d_lam P(0, q) = xi''(q)/(b - psi(q))^2 - 1"""
    return spec.xi(q, 2) / (ansatz.b - ansatz.profile(spec).psi(q)) ** 2 - 1.0


def optimality_system(spec, ansatz):
    """
    Signed first-order conditions, stacked as
    [q-optimality at each atom, phi = 1/(b - psi) at each atom, b-optimality].
    """
    profile = ansatz.profile(spec)
    b = ansatz.b
    gap0 = b - profile.psi(0.0)
    q_part, phi_part = [], []
    for q in ansatz.nu.atoms:
        q = float(q)
        q_part.append(profile.shifted_integral(b, 2, 0.0, q) + spec.h ** 2 / gap0 ** 2 - q)
        phi_part.append(profile.phi(q) - 1.0 / (b - profile.psi(q)))
    return np.array(q_part + phi_part + [b - b_from_optimality(spec, ansatz.nu)])


def optimality_residuals(spec, ansatz):
    """Absolute residuals of the first-order conditions and the strictness margins"""
    k = ansatz.nu.k
    system = np.abs(optimality_system(spec, ansatz))
    profile = ansatz.profile(spec)
    return {
        'q_optimality': system[:k].tolist(),
        'phi_psi': system[k:2 * k].tolist(),
        'b_optimality': float(system[-1]),
        'margin_b_psi': ansatz.b - profile.psi(0.0),
        'margin_b_one': ansatz.b - 1.0,
    }


def g_diagnostic(spec, ansatz, n_points=None):
    """
    G(t) = int_t^1 xi''(s) F(s) ds with F(s) = h^2/(b - psi(0))^2 + int_0^s (xi''/(b - psi)^2 - 1).
    An optimal measure puts all its mass on the minimizers of G.
    """
    n_points = n_points or get_setting('G_DIAGNOSTIC_POINTS')
    profile = ansatz.profile(spec)
    b = ansatz.b
    atoms = ansatz.nu.atoms
    t = np.unique(np.concatenate([np.linspace(0.0, 1.0, n_points), atoms]))
    offset = spec.h ** 2 / (b - profile.psi(0.0)) ** 2
    f = np.array([offset + profile.shifted_integral(b, 2, 0.0, s) - s for s in t])
    integrand = spec.xi(t, 2) * f
    tail = cumulative_trapezoid(integrand[::-1], -t[::-1], initial=0.0)[::-1]
    at_atoms = tail[np.searchsorted(t, atoms)]
    minimum = float(tail.min())
    return {
        'grid_minimum': minimum,
        'grid_argmin': float(t[int(np.argmin(tail))]),
        'atom_values': at_atoms.tolist(),
        'excess': float(at_atoms.max() - minimum),
        'passed': float(at_atoms.max() - minimum) <= 1e-6,
    }


def atom_criterion_pure_p(spec, return_witness=False):
    """
    For h = 0 and xi = beta^2 xi0 the optimal measure is a single atom iff
    g(s) = beta^2 xi0(s) + log(1 - s) + s < 0 on (0, 1).
    """
    if spec.h != 0.0:
        raise ValueError("The single-atom criterion needs h = 0")
    if not spec.has_beta:
        raise ValueError("The single-atom criterion needs xi = beta^2 * xi0")

    def g(s):
        return spec.beta ** 2 * spec.xi0(s) + np.log1p(-s) + s

    s_grid = np.linspace(1e-6, 1.0 - 1e-6, 4001)
    values = g(s_grid)
    k = int(np.argmax(values))
    lo, hi = s_grid[max(k - 1, 0)], s_grid[min(k + 1, s_grid.size - 1)]
    refined = minimize_scalar(lambda s: -g(s), bounds=(lo, hi), method='bounded', options={'xatol': 1e-12})
    s_max, g_max = float(s_grid[k]), float(values[k])
    if -refined.fun > g_max:
        s_max, g_max = float(refined.x), float(-refined.fun)
    single = g_max < 0.0
    logger.debug("Single-atom criterion for %s: max g = %.3e at s = %.4f", spec, g_max, s_max)
    if return_witness:
        return single, s_max, g_max
    return single


def manifold_gap_bound(lipschitz, epsilon, difficulty):
    """lambda_1 <= (K/eps)^2 e^-D / (1 - 4 e^-D); +inf when D <= log 4"""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    tail = math.exp(-difficulty)
    if 1.0 - 4.0 * tail <= 0.0:
        return math.inf
    return (lipschitz / epsilon) ** 2 * tail / (1.0 - 4.0 * tail)


def manifold_poincare_lower_bound(n_spins, oscillation):
    """e^{-2 osc U} (1 - 1/N), the sphere Laplacian gap perturbed by the Hamiltonian"""
    if n_spins < 2:
        raise ValueError("The sphere needs N >= 2")
    return math.exp(-2.0 * oscillation) * (1.0 - 1.0 / n_spins)
