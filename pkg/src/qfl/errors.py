"""Exception hierarchy shared by the library and the command line front-end."""


class QflError(Exception):
    """Base class for all errors raised by :mod:`qfl`."""


class ConfigurationError(QflError, ValueError):
    """Invalid parameter values (degrees, knots, tau, lambda, ...)."""


class DomainError(QflError, ValueError):
    """A strike or evaluation point lies outside the basis domain."""


class UsageError(QflError, ValueError):
    """Inconsistent shapes or an operation called on the wrong kind of input."""


class DataError(QflError):
    """Malformed option-chain input.

    ``code`` identifies the kind of problem (``"empty"``, ``"header"``,
    ``"columns"``, ``"field"``, ``"duplicate"``, ``"encoding"``, ``"syntax"``,
    ``"size"``, ``"mismatch"``) and ``line`` is the 1-based line number when
    one applies.
    """

    def __init__(self, message, code, line=None):
        self.code = code
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class SchemaError(QflError):
    """A fit artifact or report does not match the supported JSON schema."""
