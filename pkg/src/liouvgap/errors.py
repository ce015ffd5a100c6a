"""Exception hierarchy shared by all modules."""


class LiouvGapError(Exception):
    """Base class for every error raised by this package."""


class InvalidLatticeError(LiouvGapError, ValueError):
    pass


class InvalidModelError(LiouvGapError, ValueError):
    pass


class InvalidAncillaryError(LiouvGapError, ValueError):
    pass


class CapacityError(LiouvGapError, ValueError):
    """Requested a dense object that would not fit in memory."""


class SamplingError(LiouvGapError, RuntimeError):
    pass


class EstimatorInconsistencyError(LiouvGapError, RuntimeError):
    """Assembled SR quantities carry a large imaginary residue."""


class SingularSystemError(LiouvGapError, RuntimeError):
    """Both the direct solve and the least-squares fallback failed.

    ``trace`` holds the partial run trace when raised from the optimizer.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class OracleError(LiouvGapError, RuntimeError):
    pass


class NotApplicableError(LiouvGapError, ValueError):
    pass


class ExceptionalPointError(LiouvGapError, ArithmeticError):
    pass


class ConfigError(LiouvGapError, ValueError):
    """Raised by the config parser; carries the offending key and line."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line
