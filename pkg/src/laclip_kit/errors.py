"""Exception types shared across the package."""


class LaclipError(Exception):
    """Base class for all package errors."""


class ConfigError(LaclipError, ValueError):
    """Invalid configuration, detected before any work starts."""


class EmptyInput(LaclipError, ValueError):
    pass


class EmptyTranslation(LaclipError):
    pass


class BackendError(LaclipError):
    """A remote or fixture backend failed.

    ``request_id`` identifies the failing request so it can be replayed.
    """

    def __init__(self, message: str, request_id: str | None = None):
        super().__init__(message if request_id is None else f"{message} (request {request_id})")
        self.request_id = request_id


class UnknownStrategy(LaclipError, KeyError):
    def __str__(self) -> str:
        return f"unknown meta-pair strategy: {self.args[0]!r}"


class EmptyRewrite(LaclipError, ValueError):
    pass


class ParseError(LaclipError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(LaclipError, ValueError):
    def __init__(self, record_id: str):
        super().__init__(f"duplicate record id {record_id!r}")
        self.record_id = record_id


class ZeroNorm(LaclipError, ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has zero norm")
        self.row = row


class ShapeMismatch(LaclipError, ValueError):
    pass


class EmptyTextList(LaclipError, ValueError):
    pass


class NonFiniteGrad(LaclipError, FloatingPointError):
    pass


class InsufficientSamples(LaclipError, ValueError):
    def __init__(self, label, needed: int, available: int):
        super().__init__(f"class {label!r} has {available} samples, need {needed}")
        self.label = label
