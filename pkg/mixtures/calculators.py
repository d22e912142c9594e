"""
Calculator module for mixed p-spin models
Holds the mixture specification and the exact polynomial calculus of xi
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

logger = logging.getLogger(__name__)

# Finite mixtures converge everywhere; evaluation is accepted on |t| <= 1 + margin
XI_DOMAIN_MARGIN = 0.5
CONVEXITY_TOL = 1e-12


def _normalize_terms(terms):
    """Validate and sort (p, coeff) pairs, dropping zero coefficients"""
    seen = set()
    cleaned = []
    for item in terms or ():
        if len(item) != 2:
            raise ValueError(f"Mixture term {item!r} is not a (p, coeff) pair")
        p, coeff = item
        if int(p) != p or int(p) < 1:
            raise ValueError(f"Mixture degree p={p!r} must be an integer >= 1")
        p = int(p)
        coeff = float(coeff)
        if not np.isfinite(coeff) or coeff < 0:
            raise ValueError(f"Mixture coefficient for p={p} must be finite and >= 0, got {coeff}")
        if p in seen:
            raise ValueError(f"Mixture degree p={p} appears twice")
        seen.add(p)
        if coeff > 0:
            cleaned.append((p, coeff))
    return tuple(sorted(cleaned))


def _poly_eval(terms, t, order):
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t)
    for p, coeff in terms:
        if p < order:
            continue
        falling = 1.0
        for j in range(order):
            falling *= p - j
        total = total + coeff * falling * t ** (p - order)
    if total.ndim == 0:
        return float(total)
    return total


@dataclass(frozen=True)
class MixtureSpec:
    """
    Mixed p-spin model xi(t) = sum_p beta_p^2 t^p with external field h.

    When `beta` and `xi0_terms` are given the mixture is beta^2 * xi0 and
    `terms` is derived from them.
    """

    terms: tuple = ()
    h: float = 0.0
    beta: float = None
    xi0_terms: tuple = None
    generic: bool = False
    label: str = field(default='', compare=False)

    def __post_init__(self):
        h = float(self.h)
        if not np.isfinite(h) or h < 0:
            raise ValueError(f"External field h must be finite and >= 0, got {self.h}")
        object.__setattr__(self, 'h', h)

        if self.beta is not None or self.xi0_terms is not None:
            if self.beta is None or self.xi0_terms is None:
                raise ValueError("beta and xi0_terms must be given together")
            beta = float(self.beta)
            if not np.isfinite(beta) or beta <= 0:
                raise ValueError(f"beta must be > 0, got {self.beta}")
            xi0 = _normalize_terms(self.xi0_terms)
            derived = tuple((p, beta * beta * c) for p, c in xi0)
            if self.terms and _normalize_terms(self.terms) != derived:
                raise ValueError("terms disagree with beta^2 * xi0_terms")
            object.__setattr__(self, 'beta', beta)
            object.__setattr__(self, 'xi0_terms', xi0)
            object.__setattr__(self, 'terms', derived)
        else:
            object.__setattr__(self, 'terms', _normalize_terms(self.terms))

    @classmethod
    def from_beta(cls, beta, xi0_terms, h=0.0, generic=False):
        """Build xi = beta^2 * xi0"""
        return cls(h=h, beta=beta, xi0_terms=tuple(tuple(t) for t in xi0_terms), generic=generic)

    @classmethod
    def from_config(cls, block):
        """Build a spec from a validated `[model]` configuration block"""
        h = block.get('h') or 0.0
        generic = bool(block.get('generic', False))
        if block.get('xi0_terms'):
            return cls.from_beta(block['beta'], block['xi0_terms'], h=h, generic=generic)
        return cls(terms=tuple(tuple(t) for t in block.get('terms') or ()), h=h, generic=generic)

    def with_beta(self, beta):
        """Same base mixture at another inverse temperature"""
        if self.xi0_terms is None:
            raise ValueError("Mixture has no beta^2 * xi0 decomposition")
        return MixtureSpec.from_beta(beta, self.xi0_terms, h=self.h, generic=self.generic)

    @property
    def is_even(self):
        return all(p % 2 == 0 for p, _ in self.terms)

    @property
    def is_zero(self):
        return not self.terms

    @property
    def max_degree(self):
        return max((p for p, _ in self.terms), default=0)

    @property
    def has_beta(self):
        return self.xi0_terms is not None

    def xi(self, t, order=0):
        """xi and its derivatives of any order, without domain checks"""
        return _poly_eval(self.terms, t, order)

    def xi0(self, t, order=0):
        if self.xi0_terms is None:
            raise ValueError("Mixture has no beta^2 * xi0 decomposition")
        return _poly_eval(self.xi0_terms, t, order)

    def polynomial(self, order=0):
        """xi^(order) as a numpy Polynomial"""
        coef = np.zeros(self.max_degree + 1)
        for p, c in self.terms:
            coef[p] = c
        return Polynomial(coef).deriv(order) if order else Polynomial(coef)

    def as_dict(self):
        data = {
            'terms': [[p, c] for p, c in self.terms],
            'h': self.h,
            'generic': self.generic,
        }
        if self.has_beta:
            data['beta'] = self.beta
            data['xi0_terms'] = [[p, c] for p, c in self.xi0_terms]
        return data

    def __str__(self):
        if not self.terms:
            body = '0'
        else:
            body = ' + '.join(f"{c:g}*t^{p}" for p, c in self.terms)
        return f"xi(t) = {body}, h = {self.h:g}"


def eval_xi(spec, t, order=0):
    """Evaluate xi, xi' or xi'' exactly"""
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order!r}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t_arr)) or np.any(np.abs(t_arr) > 1.0 + XI_DOMAIN_MARGIN):
        raise ValueError(f"t must satisfy |t| <= {1.0 + XI_DOMAIN_MARGIN}")
    return spec.xi(t_arr, order)


def xi_derivative_table(spec, t):
    """(xi, xi', xi'') at t in a single call"""
    return spec.xi(t, 0), spec.xi(t, 1), spec.xi(t, 2)


def is_convex(spec):
    """
    True iff xi'' >= 0 on [-1, 1].

    On [0, 1] every term of xi'' is nonnegative, so only [-1, 0] is checked:
    the minimum of xi'' sits at an endpoint or at a real root of xi'''.
    """
    if spec.max_degree <= 2:
        return True
    second = spec.polynomial(2)
    candidates = [-1.0, 0.0]
    third = second.deriv()
    if third.degree() >= 1:
        for root in third.roots():
            if abs(root.imag) < 1e-12 and -1.0 <= root.real <= 0.0:
                candidates.append(float(root.real))
    minimum = min(float(second(c)) for c in candidates)
    scale = max(1.0, float(second(1.0)))
    convex = minimum >= -CONVEXITY_TOL * scale
    logger.debug("xi'' minimum on [-1, 0] is %.3e (convex=%s)", minimum, convex)
    return convex
