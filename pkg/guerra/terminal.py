"""
Terminal data of the two-replica Parisi PDE
    f_lam(x, y) = log(1/4 sum_{e1, e2 = +-1} exp(e1 x + e2 y + lam e1 e2))
"""

import math

import numpy as np

from parisi.solvers import log_cosh


def terminal_data(lam, x, y):
    """f_lam, d_lam f and d_lam^2 f at (x, y), broadcasting x against y"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    plus = lam + log_cosh(x + y)
    minus = -lam + log_cosh(x - y)
    value = np.logaddexp(plus, minus) - math.log(2.0)
    # (A - B) / (A + B) with A = exp(plus), B = exp(minus)
    d_lam = np.tanh(0.5 * (plus - minus))
    d_lam2 = 1.0 - d_lam ** 2
    return value, d_lam, d_lam2


def terminal_grid(lam, x_grid):
    """Terminal data on the tensor grid x_grid x x_grid (first axis is x)"""
    return terminal_data(lam, x_grid[:, None], x_grid[None, :])
