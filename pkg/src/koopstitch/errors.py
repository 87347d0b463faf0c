"""Exception hierarchy.

Validation problems (bad input, bad config, violated preconditions) and
numerical failures are kept apart so the CLI can map them to distinct
exit codes.
"""


class KoopstitchError(Exception):
    """Base class for all package errors."""


class ValidationError(KoopstitchError, ValueError):
    """Input, shape or configuration is invalid."""


class InsufficientDataError(ValidationError):
    """Not enough distinct data to build the requested object."""


class PreconditionError(ValidationError):
    """A mathematical precondition of an operation does not hold."""


class NumericalError(KoopstitchError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class IntegrationError(NumericalError):
    """ODE integration left the admissible domain or became non-finite.

    Attributes
    ----------
    state : numpy.ndarray or None
        Last state (or stage input) at which the failure was detected.
    step : int or None
        Sample index at which the failure occurred, when known.
    """

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class RankZeroError(NumericalError):
    """The lifted data has numerical rank zero."""


class DomainError(IntegrationError):
    """A state lies outside the domain on which a vector field is defined."""
