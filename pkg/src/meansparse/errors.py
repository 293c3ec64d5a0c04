"""Exception hierarchy. The CLI maps each family onto an exit code."""


class MeanSparseError(Exception):
    exit_code = 1


class ConfigError(MeanSparseError, ValueError):
    """Invalid configuration, flag, or parameter value."""

    exit_code = 2


class ShapeError(ConfigError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ParameterDomainError(ConfigError):
    pass


class DataError(MeanSparseError):
    exit_code = 3


class DataFormatError(DataError, ValueError):
    pass


class NumericError(MeanSparseError, ArithmeticError):
    exit_code = 4


class NumericOverflowError(NumericError):
    def __init__(self, op, detail=""):
        self.op = op
        msg = f"{op}: non-finite result"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(NumericError):
    """Raised by iterative solvers; carries the partial trace."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace
