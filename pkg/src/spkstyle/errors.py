"""Exception hierarchy used across the package.

Every error the CLI maps to a nonzero exit code derives from
:class:`SpkStyleError`; callers that want finer-grained handling can catch
the specific subclasses.
"""


class SpkStyleError(Exception):
    """Base class for all package errors."""


class ParameterError(SpkStyleError, ValueError):
    """An argument violates an operation's precondition."""


class EmptyInputError(ParameterError):
    """Input is empty or too short to process."""


class IngestError(SpkStyleError, IOError):
    """An audio or feature file could not be read or decoded."""


class DataError(SpkStyleError):
    """A manifest or corpus fails validation."""


class ConfigError(SpkStyleError):
    """Configuration is missing, malformed, or inconsistent."""


class NumericError(SpkStyleError, ArithmeticError):
    """A computation produced non-finite values."""


class UndefinedScoreError(ParameterError):
    """A similarity score is undefined (e.g. zero-norm embedding)."""


class TrainingDiverged(NumericError):
    """Training halted because the total loss became non-finite."""
