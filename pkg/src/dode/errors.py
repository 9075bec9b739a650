"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: InvalidInputError -> 1, NumericError
(and subclasses) -> 2.
"""


class DodeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DodeError, ValueError):
    """Caller passed an argument outside the documented domain."""


class NumericError(DodeError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable values.

    ``index`` optionally names the offending batch/datum index.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularityError(NumericError):
    """A predictor conversion hit a vanishing denominator at extreme gamma."""


class NonConvergenceError(NumericError):
    """Adaptive solver ran out of steps; carries the partial state."""

    def __init__(self, message, partial_state=None, gamma_reached=None):
        super().__init__(message)
        self.partial_state = partial_state
        self.gamma_reached = gamma_reached


class TrainingDivergedError(NumericError):
    """Training loss was non-finite for too many consecutive steps."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ParseError(InvalidInputError):
    """A file could not be parsed; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(ParseError):
    """File declares a format version this build does not understand."""
