"""Exception types shared across the library."""


class DropRegError(Exception):
    """Base class for all library errors."""


class DimensionError(DropRegError, ValueError):
    """Operand shapes do not conform."""


class ConvergenceError(DropRegError, RuntimeError):
    """Iterative routine failed to converge.

    Carries the final off-diagonal mass so callers can judge how far
    the iteration got.
    """

    def __init__(self, message, off_diagonal_mass):
        super().__init__(message)
        self.off_diagonal_mass = off_diagonal_mass


class BlockPartitionError(DropRegError, ValueError):
    """Block size does not divide the layer width."""


class DegenerateSchemeError(DropRegError, ValueError):
    """Retain probability outside the usable range (inverse-mean rescaling undefined)."""


class InvalidSpectrumError(DropRegError, ValueError):
    """Singular-value vector is unsorted or contains negative entries."""


class DegenerateFactorError(DropRegError, ValueError):
    """Factor pair is identically zero where a nonzero one is required."""


class RankDeficiencyError(DropRegError, RuntimeError):
    """Sampled data matrix failed the full-rank guard."""


class EnumerationTooLargeError(DropRegError, ValueError):
    """Exhaustive mask enumeration would exceed the feasibility cap."""


class DivergenceError(DropRegError, RuntimeError):
    """Training objective blew up; the learning rate is too large."""

    def __init__(self, message, learning_rate):
        super().__init__(message)
        self.learning_rate = learning_rate
