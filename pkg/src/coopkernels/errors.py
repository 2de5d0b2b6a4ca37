"""Exception types shared across the package."""


class CoopError(Exception):
    """Base class for all errors raised by coopkernels."""


class ParseError(CoopError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class ValidationError(CoopError):
    """Raised when an invalid program is launched."""

    def __init__(self, report):
        self.report = report
        super().__init__("; ".join(str(v) for v in report.violations))


class ExecutionError(CoopError):
    pass


class UninitialisedRead(ExecutionError):
    pass


class OutOfBoundsAccess(ExecutionError):
    pass


class DivisionByZero(ExecutionError):
    pass


class NonUniformReach(ExecutionError):
    """A workgroup-level primitive was reached non-uniformly."""


class DivergentWorkgroupOp(NonUniformReach):
    pass


class ForkBoundExceeded(ExecutionError):
    pass


class BarrierDivergence(ExecutionError):
    pass


class DeadlockDetected(ExecutionError):
    pass


class StepBudgetExceeded(ExecutionError):
    pass


class RejectedNoCapacity(CoopError):
    pass


class NotYetSatisfied(CoopError):
    pass


class InvalidInterval(CoopError):
    pass


class MismatchedOutputs(CoopError):
    pass


class MissingData(CoopError):
    pass


class ConfigError(CoopError):
    pass
