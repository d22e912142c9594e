"""
Reversible nearest-neighbour chains on the hypercube and their spectral gaps
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from mixtures.conf import get_setting
from mixtures.exceptions import ConvergenceError, InvariantViolation
from mixtures.sampling import popcount

logger = logging.getLogger(__name__)

KERNEL_TOL = 1e-12


@dataclass
class ChainKernel:
    """
    Row-stochastic transition matrix with its stationary vector.

    Replicated kernels beyond the materialization limit keep only `base`
    and act through Kronecker-structured matvecs.
    """

    n_spins: int
    stationary: np.ndarray
    matrix: sp.csr_matrix = None
    kind: str = 'metropolis'
    replicated: bool = False
    base: 'ChainKernel' = None

    @property
    def n_states(self):
        return self.stationary.size

    @property
    def is_materialized(self):
        return self.matrix is not None

    def apply(self, vector):
        """Q v"""
        if self.is_materialized:
            return self.matrix @ vector
        n = self.base.n_states
        grid = np.asarray(vector).reshape(n, n)
        q = self.base.matrix
        return (0.5 * (q @ grid + (q @ grid.T).T)).reshape(-1)

    def check_invariants(self, tol=KERNEL_TOL):
        """Row sums, non-negativity, detailed balance and nearest-neighbour support"""
        if not self.is_materialized:
            self.base.check_invariants(tol)
            return
        q = self.matrix.tocoo()
        if q.data.size and q.data.min() < 0.0:
            raise InvariantViolation("Negative transition probability", {'min': float(q.data.min())})
        rows = np.asarray(self.matrix.sum(axis=1)).ravel()
        if np.max(np.abs(rows - 1.0)) > tol:
            raise InvariantViolation("Rows do not sum to 1", {'max_error': float(np.max(np.abs(rows - 1.0)))})
        pi = self.stationary
        flow = pi[q.row] * q.data
        reverse = pi[q.col] * np.asarray(self.matrix[q.col, q.row]).ravel()
        scale = np.maximum(np.abs(flow), np.abs(reverse))
        relative = np.abs(flow - reverse) / np.where(scale > 0, scale, 1.0)
        if relative.size and relative.max() > tol:
            raise InvariantViolation("Detailed balance fails", {'max_relative_error': float(relative.max())})
        if self.replicated:
            n = self.base.n_states
            distance = popcount((q.row // n) ^ (q.col // n)) + popcount((q.row % n) ^ (q.col % n))
        else:
            distance = popcount(q.row ^ q.col)
        if np.any(distance > 1):
            raise InvariantViolation("Transition beyond Hamming distance 1")

    def write_triplets(self, path):
        """Sparse (row, col, value) text export"""
        if not self.is_materialized:
            raise ValueError("Matrix-free replicated kernels cannot be exported")
        q = self.matrix.tocoo()
        np.savetxt(
            path, np.column_stack([q.row, q.col, q.data]), fmt=['%d', '%d', '%.17g'],
            header=f"row col value; n_states={self.n_states} kind={self.kind} replicated={self.replicated}",
        )
        return path


def _check_single_size(n_spins):
    n_max = get_setting('N_MAX_TABLE')
    if n_spins > n_max:
        raise ValueError(f"N={n_spins} exceeds the kernel limit N_MAX_TABLE={n_max}")


def build_metropolis(table):
    """Q(x, y) = (1/N) min(1, pi(y)/pi(x)) on Hamming neighbours, holding on the diagonal"""
    n = table.n_spins
    _check_single_size(n)
    states = np.arange(table.n_states)
    rows, cols, values = [], [], []
    holding = np.ones(table.n_states)
    for i in range(n):
        neighbours = states ^ (1 << i)
        rate = np.exp(-np.clip(table.values[neighbours] - table.values, 0.0, None)) / n
        rows.append(states)
        cols.append(neighbours)
        values.append(rate)
        holding -= rate
    rows.append(states)
    cols.append(states)
    values.append(np.clip(holding, 0.0, None))
    matrix = sp.csr_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
        shape=(table.n_states, table.n_states),
    )
    matrix.eliminate_zeros()
    return ChainKernel(n, table.gibbs_weights(), matrix, kind='metropolis')


def lazy(kernel):
    """(I + Q)/2"""
    if not kernel.is_materialized:
        raise ValueError("lazy() needs a materialized kernel")
    identity = sp.identity(kernel.n_states, format='csr')
    return ChainKernel(
        kernel.n_spins, kernel.stationary, (0.5 * (identity + kernel.matrix)).tocsr(),
        kind=f'lazy-{kernel.kind}', replicated=kernel.replicated, base=kernel.base,
    )


def build_replicated(kernel, materialize=None):
    """Q_r = (Q x I + I x Q)/2 with stationary pi x pi"""
    if kernel.replicated:
        raise ValueError("The kernel is already replicated")
    n_max = get_setting('REPLICATED_MAX_N')
    if kernel.n_spins > n_max:
        raise ValueError(f"N={kernel.n_spins} exceeds the replicated limit REPLICATED_MAX_N={n_max}")
    if materialize is None:
        materialize = kernel.n_spins <= get_setting('REPLICATED_MATERIALIZE_MAX_N')
    stationary = np.kron(kernel.stationary, kernel.stationary)
    matrix = None
    if materialize:
        identity = sp.identity(kernel.n_states, format='csr')
        matrix = (0.5 * (sp.kron(kernel.matrix, identity) + sp.kron(identity, kernel.matrix))).tocsr()
    return ChainKernel(kernel.n_spins, stationary, matrix, kind=kernel.kind, replicated=True, base=kernel)


def symmetrized(kernel):
    """S = D^1/2 Q D^-1/2 with D = diag(pi), symmetric for reversible Q"""
    root = np.sqrt(kernel.stationary)
    return (sp.diags(root) @ kernel.matrix @ sp.diags(1.0 / root)).tocsr()


@dataclass(frozen=True)
class GapResult:
    value: float
    residual: float
    method: str
    n_states: int

    def as_dict(self):
        return {'value': self.value, 'residual': self.residual, 'method': self.method, 'n_states': self.n_states}


def _symmetric_operator(kernel):
    if kernel.is_materialized:
        s = symmetrized(kernel)
        return s.shape[0], lambda v: s @ v
    s = symmetrized(kernel.base)
    n = kernel.base.n_states

    def matvec(v):
        grid = np.asarray(v).reshape(n, n)
        return (0.5 * (s @ grid + (s @ grid.T).T)).reshape(-1)
    return n * n, matvec


def spectral_gap(kernel, method='auto'):
    """Second-smallest eigenvalue of I - Q through the pi-symmetrized matrix"""
    size, matvec = _symmetric_operator(kernel)
    if method == 'auto':
        method = 'dense' if size <= get_setting('EIGEN_DENSE_MAX') and kernel.is_materialized else 'iterative'

    if method == 'dense':
        s = symmetrized(kernel).toarray()
        generator = np.eye(size) - 0.5 * (s + s.T)
        if size == 1:
            raise ValueError("A one-state chain has no spectral gap")
        values, vectors = scipy.linalg.eigh(generator, subset_by_index=[0, 1])
        value, vector = float(values[1]), vectors[:, 1]
        residual = float(np.linalg.norm(generator @ vector - value * vector))
        tol = get_setting('EIGEN_TOL_DENSE')
    elif method == 'iterative':
        ground = np.sqrt(kernel.stationary)

        def deflated(v):
            return matvec(v) - ground * np.dot(ground, v)

        operator = LinearOperator((size, size), matvec=deflated, dtype=float)
        tol = get_setting('EIGEN_TOL_ITERATIVE')
        try:
            top, vectors = eigsh(operator, k=1, which='LA', tol=tol, maxiter=20 * size)
        except ArpackNoConvergence as exc:
            raise ConvergenceError(f"Eigensolver did not converge on {size} states") from exc
        vector = vectors[:, 0]
        value = 1.0 - float(top[0])
        residual = float(np.linalg.norm(vector - matvec(vector) - value * vector))
    else:
        raise ValueError(f"Unknown eigen method {method!r}")

    if residual > 100.0 * max(tol, 1e-12) * max(1.0, np.sqrt(size)):
        raise ConvergenceError(f"Eigen residual {residual:.2e} too large for {size} states")
    logger.debug("Spectral gap %.6e on %d states (%s, residual %.1e)", value, size, method, residual)
    return GapResult(value, residual, method, size)
