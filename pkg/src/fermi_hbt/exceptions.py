"""Exception hierarchy.

The CLI maps these onto exit codes: ``ValidationError`` -> 1, ``DecodeError``
and ``OSError`` -> 2, ``NumericalError`` -> 3.
"""


class FermiHBTError(Exception):
    """Base class for all package errors."""


class ValidationError(FermiHBTError, ValueError):
    """Input or configuration violates a documented invariant."""


class ConfigError(ValidationError):
    """Bad run configuration (unknown key, out-of-range value, ...)."""

    def __init__(self, message, section=None, key=None):
        loc = ""
        if section is not None:
            loc = f"[{section}]" + (f" {key}" if key is not None else "")
            loc += ": "
        super().__init__(loc + message)
        self.section = section
        self.key = key


class UnsortedStreamError(ValidationError):
    def __init__(self, stream, position):
        super().__init__(
            f"stream {stream} is not sorted by (tick, pixel) at position {position}"
        )
        self.stream = stream
        self.position = position


class RegimeError(ValidationError):
    """Beam parameters outside the regime where the generator is valid."""


class NormalizationError(ValidationError):
    pass


class DecodeError(FermiHBTError, ValueError):
    """Malformed NTT1 payload."""


class BadMagicError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class TruncatedRecordError(DecodeError):
    pass


class UnsortedPayloadError(DecodeError):
    pass


class NumericalError(FermiHBTError, ArithmeticError):
    pass


class QuadratureError(NumericalError):
    def __init__(self, message, abserr=None):
        super().__init__(message)
        self.abserr = abserr


class FitError(NumericalError):
    pass
