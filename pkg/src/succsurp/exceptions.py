"""Exception hierarchy.

Everything raised on purpose derives from :class:`SuccsurpError` so the CLI
can map it to an exit code in one place.
"""


class SuccsurpError(Exception):
    """Base class for all package errors."""


class InputError(SuccsurpError, ValueError):
    """Malformed or out-of-range input."""


class ContractError(SuccsurpError, TypeError):
    """An object was handed to the wrong model (e.g. a foreign context state)."""


class NumericError(SuccsurpError, FloatingPointError):
    """A non-finite value appeared in a computation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(SuccsurpError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(InputError):
    """Records that do not reference each other consistently."""


class ConfigurationError(InputError):
    """A requested analysis cannot be set up with the given data or spec."""


class UsageError(SuccsurpError, ValueError):
    """A statistically invalid request, e.g. comparing non-nested models."""


class UndefinedCorrelationError(InputError):
    """Correlation requested on a zero-variance series."""
