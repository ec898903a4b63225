"""Exception taxonomy shared across the package.

Each class maps to one CLI exit code so batch callers can branch on
failure category without parsing stderr.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTEGRITY = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class TokentraceError(Exception):
    """Base class for all package errors."""

    exit_code = EXIT_USAGE


class DataFormatError(TokentraceError):
    """A record could not be parsed; carries the offending line number."""

    exit_code = EXIT_INTEGRITY

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataIntegrityError(TokentraceError):
    """Well-formed input that violates a dataset invariant."""

    exit_code = EXIT_INTEGRITY


class GrammarError(TokentraceError):
    """Rendered text does not conform to the tag grammar."""

    exit_code = EXIT_INTEGRITY

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"at char {position}: {message}"
        super().__init__(message)


class NumericError(TokentraceError):
    """A numeric contract failed (non-finite gradient, undefined metric)."""

    exit_code = EXIT_NUMERIC


class StateError(TokentraceError):
    """An operation was called in an invalid order (e.g. backward before forward)."""

    exit_code = EXIT_USAGE


class EvaluationError(TokentraceError):
    """A single example could not be scored (e.g. position budget overflow).

    Recorded per example by the evaluation protocol, not fatal to a run.
    """

    exit_code = EXIT_USAGE
