"""
Atomic probability measures on [0, 1]
"""

import numpy as np

MASS_SUM_TOL = 1e-12


class AtomicMeasure:
    """
    k-atomic probability measure sum_i w_i delta_{q_i} with right-continuous
    CDF m(s) = sum_{q_i <= s} w_i.
    """

    def __init__(self, atoms, masses):
        atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
        masses = np.atleast_1d(np.asarray(masses, dtype=float))
        if atoms.ndim != 1 or atoms.shape != masses.shape or atoms.size == 0:
            raise ValueError("atoms and masses must be non-empty 1D arrays of equal length")
        if np.any(~np.isfinite(atoms)) or np.any(atoms < 0.0) or np.any(atoms > 1.0):
            raise ValueError(f"atoms must lie in [0, 1], got {atoms.tolist()}")
        if np.any(np.diff(atoms) <= 0.0):
            raise ValueError(f"atoms must be strictly ascending, got {atoms.tolist()}")
        if np.any(~np.isfinite(masses)) or np.any(masses <= 0.0):
            raise ValueError(f"masses must be positive, got {masses.tolist()}")
        if abs(masses.sum() - 1.0) > MASS_SUM_TOL:
            raise ValueError(f"masses must sum to 1, got {masses.sum()!r}")
        self.atoms = atoms
        self.masses = masses
        self.atoms.setflags(write=False)
        self.masses.setflags(write=False)

    @classmethod
    def delta(cls, q):
        return cls([q], [1.0])

    @classmethod
    def from_unnormalized(cls, atoms, masses):
        """Sort atoms, combine duplicates and renormalize the masses"""
        atoms = np.asarray(atoms, dtype=float)
        masses = np.asarray(masses, dtype=float)
        order = np.argsort(atoms, kind='stable')
        unique, inverse = np.unique(atoms[order], return_inverse=True)
        combined = np.zeros(unique.size)
        np.add.at(combined, inverse, masses[order])
        keep = combined > 0
        return cls(unique[keep], combined[keep] / combined[keep].sum())

    def __repr__(self):
        pairs = ', '.join(f"{q:.6g}:{w:.6g}" for q, w in zip(self.atoms, self.masses))
        return f"AtomicMeasure({pairs})"

    def __eq__(self, other):
        if not isinstance(other, AtomicMeasure):
            return NotImplemented
        return (
            self.atoms.shape == other.atoms.shape
            and np.array_equal(self.atoms, other.atoms)
            and np.array_equal(self.masses, other.masses)
        )

    def __hash__(self):
        return hash((self.atoms.tobytes(), self.masses.tobytes()))

    @property
    def k(self):
        return self.atoms.size

    @property
    def q_max(self):
        return float(self.atoms[-1])

    def cdf(self, s):
        """m(s) = mu([0, s])"""
        s = np.asarray(s, dtype=float)
        cumulative = np.concatenate([[0.0], np.cumsum(self.masses)])
        cumulative[-1] = 1.0
        value = cumulative[np.searchsorted(self.atoms, s, side='right')]
        if value.ndim == 0:
            return float(value)
        return value

    def knots(self):
        """Sorted breakpoints {0, atoms, 1}"""
        return np.unique(np.concatenate([[0.0], self.atoms, [1.0]]))

    def pieces(self):
        """Constancy intervals (t_lo, t_hi, m) of the CDF covering [0, 1)"""
        knots = self.knots()
        return [(float(lo), float(hi), self.cdf(lo)) for lo, hi in zip(knots[:-1], knots[1:])]

    def second_largest_mass(self):
        if self.k < 2:
            return 0.0
        return float(np.sort(self.masses)[-2])

    def is_atom(self, tol):
        """Single-atom up to a mass tolerance"""
        return self.second_largest_mass() < tol

    def merged(self, tol):
        """Merge neighbouring atoms closer than tol into their mass-weighted mean"""
        groups = [[0]]
        for i in range(1, self.k):
            if self.atoms[i] - self.atoms[groups[-1][-1]] < tol:
                groups[-1].append(i)
            else:
                groups.append([i])
        atoms = []
        masses = []
        for group in groups:
            w = self.masses[group]
            atoms.append(float(np.dot(w, self.atoms[group]) / w.sum()))
            masses.append(float(w.sum()))
        masses = np.asarray(masses)
        return AtomicMeasure(atoms, masses / masses.sum())

    def pruned(self, mass_tol):
        """Drop atoms with mass below mass_tol, keeping at least the heaviest"""
        keep = self.masses >= mass_tol
        if not keep.any():
            keep[np.argmax(self.masses)] = True
        masses = self.masses[keep]
        return AtomicMeasure(self.atoms[keep], masses / masses.sum())

    def expectation(self, func):
        return float(np.dot(self.masses, func(self.atoms)))

    def as_dict(self):
        return {'atoms': self.atoms.tolist(), 'masses': self.masses.tolist()}


def measure_distance(mu, nu):
    """L1 distance between CDFs, int_0^1 |m_mu(s) - m_nu(s)| ds"""
    knots = np.unique(np.concatenate([mu.knots(), nu.knots()]))
    lo = knots[:-1]
    widths = np.diff(knots)
    return float(np.sum(np.abs(mu.cdf(lo) - nu.cdf(lo)) * widths))
