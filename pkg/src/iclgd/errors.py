"""Exception types shared across the package."""

import numpy as np


class DimensionError(ValueError):
    """Array shapes are inconsistent with each other or with the problem."""


class RegimeError(ValueError):
    """Parameters fall outside the regime where an estimator or formula applies."""


class SingularDesignError(np.linalg.LinAlgError):
    """A Gram matrix is numerically rank deficient."""


class DataError(ValueError):
    """A non-finite value was fed to a statistics accumulator."""


class CapacityError(RuntimeError):
    """A simulation request exceeds the configured resource limits."""


class InputError(ValueError):
    """An identity was evaluated without one of its required inputs."""


class UnsupportedError(ValueError):
    """The requested option combination is not supported."""
