"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 2,
NumericalError -> 3, OutputError -> 4.
"""


class NftIndexError(Exception):
    """Base class for all package errors."""


class ValidationError(NftIndexError):
    """Bad input: malformed files, violated preconditions, unknown keys."""


class NumericalError(NftIndexError):
    """The computation itself is ill-posed (rank deficiency, degeneracy)."""


class RankDeficientError(NumericalError):
    """Design matrix is rank deficient; `columns` names the collinear columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateRegressionError(NumericalError):
    """A unit-root regression window has zero residual or regressor variance."""


class OutputError(NftIndexError):
    """Writing a result to disk failed."""
