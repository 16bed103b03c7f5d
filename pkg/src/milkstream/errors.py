"""Exception types shared across the package."""


class MilkstreamError(Exception):
    pass


class InvalidArgument(MilkstreamError, ValueError):
    pass


class NumericFailure(MilkstreamError, ArithmeticError):
    pass


class ContractViolation(MilkstreamError, RuntimeError):
    """A streaming consumer looked at source positions it has not read."""


class FormatError(MilkstreamError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VersionError(MilkstreamError):
    pass
