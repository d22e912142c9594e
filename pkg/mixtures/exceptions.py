"""
Numerical error taxonomy shared by every app
"""


class ConvergenceError(RuntimeError):
    """A solver, optimizer or eigensolver failed its convergence check"""


class GridError(ConvergenceError):
    """The discretization is too small or violates its stability constraint"""


class InvariantViolation(RuntimeError):
    """A proven identity or inequality failed on a computed instance"""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}
