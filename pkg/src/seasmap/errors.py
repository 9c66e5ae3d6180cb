"""Exception hierarchy shared by all seasmap modules."""


class SeasmapError(Exception):
    """Base class for all errors raised by seasmap."""


class ValidationError(SeasmapError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A row of an input file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DuplicateKeyError(ValidationError):
    """The same (facility, year, month) key appears more than once."""


class DomainError(ValidationError):
    """A location or argument lies outside the supported domain."""


class NumericalError(SeasmapError, ArithmeticError):
    """A linear-algebra or optimisation step failed numerically."""


class SingularityError(NumericalError):
    """A covariance matrix is singular, e.g. because of duplicate locations."""


class FitError(NumericalError):
    """Model or curve fitting failed to produce a finite optimum."""
