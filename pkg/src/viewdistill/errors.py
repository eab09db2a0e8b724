"""Exception hierarchy shared by every module."""


class ViewDistillError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ViewDistillError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ViewDistillError):
    pass


class FormatError(ViewDistillError):
    pass


class TruncationError(FormatError):
    pass


class ResolutionError(ViewDistillError):
    pass


class ContractError(ViewDistillError):
    pass


class DegenerateGeometryError(ViewDistillError):
    pass


class DegenerateInputError(ViewDistillError):
    pass


class SamplingError(ViewDistillError):
    pass


class ConfigurationError(ViewDistillError):
    pass


class InterpolationError(ViewDistillError):
    pass


class NumericError(ViewDistillError):
    """Raised when training produces a non-finite loss."""
