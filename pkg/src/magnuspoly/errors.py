"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 1,
numerical failures with 2 and artifact / file problems with 3.
"""


class MagnusError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ValidationError(MagnusError, ValueError):
    """Malformed input: non-Hermitian operators, mismatched dimensions, bad ranges."""


class LimitError(ValidationError):
    """A combinatorial or memory guard was exceeded."""


class ClosureError(MagnusError):
    """A bracket left the span of the Lie basis by more than the tolerance."""

    def __init__(self, message, pair=None, residual=None):
        super().__init__(message)
        self.pair = pair
        self.residual = residual


class ConventionError(MagnusError):
    """An imaginary residue appeared where the bracket convention guarantees real values."""


class ReferenceUnconvergedError(MagnusError):
    """The ODE reference changed by more than the tolerance under step doubling."""


class QuadratureError(MagnusError):
    """Nested quadrature did not stabilise."""


class ResourceError(MagnusError):
    """Spline resampling exceeded the segment cap."""


class ArtifactError(MagnusError):
    """Corrupt, tampered or incompatible coefficient artifact."""

    exit_code = 3


class ConfigError(MagnusError):
    """Invalid run configuration."""

    exit_code = 1
