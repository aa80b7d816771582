"""Exception hierarchy shared by all sparsecl modules."""


class SparseCLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SparseCLError, ValueError):
    """Array dimensions are inconsistent or empty."""


class DecompositionError(SparseCLError, ArithmeticError):
    """A matrix factorization failed (rank deficiency, non-SPD input)."""


class DictionaryConstructionError(SparseCLError, RuntimeError):
    """No dictionary met the infinity-norm bound within the retry budget."""


class NumericError(SparseCLError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(SparseCLError, RuntimeError):
    """Training produced non-finite or exploding weights.

    The partially built trajectory is attached as ``trajectory`` so callers
    can still persist what was logged before the failure.
    """

    def __init__(self, message, trajectory=None, step=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


class ConfigError(SparseCLError, ValueError):
    """Invalid or unknown configuration value."""


class ProbeError(SparseCLError, RuntimeError):
    """A downstream probe could not be fitted."""
