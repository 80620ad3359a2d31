"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class TdoakitError(Exception):
    """Base class for all package errors."""


class ConfigError(TdoakitError):
    """Invalid configuration: bad values, unknown keys, version mismatch."""


class DataError(TdoakitError):
    """Invalid input data: bad WAV files, shape mismatches, NaNs."""


class NumericError(TdoakitError):
    """Numeric failure: NaN loss, conjugate-symmetry violation, infeasible T60."""


class InvalidLengthError(DataError):
    """Signal length violates a precondition (e.g. not a power of two)."""


class ShapeError(DataError):
    """Mismatched array shapes between operands."""


class ConjugateSymmetryError(NumericError):
    """Spectrum of a supposedly real signal has too much imaginary residue."""


class InfeasibleT60Error(NumericError):
    """Requested reverberation time cannot be realized in the given room."""


class DegenerateGeometryError(DataError):
    """Scene geometry is degenerate (e.g. source coincident with a mic)."""


class MissingGraphError(TdoakitError):
    """backward() called on a tensor with no recorded forward graph."""
