"""Exception hierarchy for coneregress."""


class ConeRegressionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidSignalError(ConeRegressionError, ValueError):
    pass


class RankDeficientError(ConeRegressionError):
    """A set of constraint rows (or appended columns) is linearly dependent."""


class SingularUpdateError(ConeRegressionError):
    """Sherman-Morrison denominator too small; recompute the inverse from scratch."""


class NotPositiveDefiniteError(ConeRegressionError):
    pass


class StepSizeError(ConeRegressionError):
    """An iterative method diverged, usually because its step size is too large."""


class OracleError(ConeRegressionError):
    """Exhaustive enumeration found zero or several distinct KKT points."""


class ReferenceDisagreementError(ConeRegressionError):
    """Independent finite solvers disagree on a reference solution."""


class StalledSearchError(ConeRegressionError):
    """A finite active-set search hit its step cap without terminating."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class SingularBlockSystemError(ConeRegressionError):
    def __init__(self, message, knots=None):
        super().__init__(message)
        self.knots = knots
