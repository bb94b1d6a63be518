"""Exception types shared across the package."""

import numpy as np


class ConfigurationError(ValueError):
    """A model, library or view set is missing something it needs."""


class DomainError(ValueError):
    """A numerical argument lies outside the domain of the operation."""


class InputError(ValueError):
    """Malformed user input (CSV rows, system files, flags)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegeneratePathError(ValueError):
    """Path has zero length or coincident nodes where a direction is needed."""


class NonFiniteError(FloatingPointError):
    """A NaN/inf showed up during an iterative solve."""

    def __init__(self, message, iteration=None, node=None):
        super().__init__(message)
        self.iteration = iteration
        self.node = node


class SingularSystemError(np.linalg.LinAlgError):
    """Saddle-point matrix could not be factorized."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConstraintViolationError(RuntimeError):
    """Integration left the constraint manifold beyond the hard ceiling."""

    def __init__(self, message, violation=None, time=None):
        super().__init__(message)
        self.violation = violation
        self.time = time
