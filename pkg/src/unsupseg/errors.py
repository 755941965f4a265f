"""Exception types shared across the toolkit."""


class UnsupSegError(Exception):
    """Base class for toolkit errors."""


class ContractError(UnsupSegError, ValueError):
    """An argument violated an operation's precondition (shapes, ranges)."""


class InputTooShortError(ContractError):
    def __init__(self, length, minimum, what="input"):
        super().__init__(f"{what} has length {length}, need at least {minimum} samples")
        self.length = length
        self.minimum = minimum


class ConfigError(UnsupSegError):
    pass


class DataError(UnsupSegError):
    """Unreadable or out-of-format audio, annotation or manifest data."""


class SampleRateError(DataError):
    def __init__(self, got, expected, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"sample rate {got} Hz{where}, expected {expected} Hz (no resampling is done)")
        self.got = got
        self.expected = expected


class AnnotationParseError(DataError):
    def __init__(self, message, line=None, path=None):
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"line {line}: "
        super().__init__(loc + message)
        self.line = line


class CheckpointError(DataError):
    pass


class NumericError(UnsupSegError, ArithmeticError):
    """Non-finite values appeared in a loss or a gradient."""
