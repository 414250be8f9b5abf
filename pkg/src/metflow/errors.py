"""Exception types shared across the package."""


class MetFlowError(Exception):
    """Base class for all package errors."""


class NumericalError(MetFlowError, ArithmeticError):
    """A computation produced a non-finite value.

    Attributes:
        node: index of the offending tape node, if known.
        op: name of the primitive that produced it, if known.
        step: Markov step index at which the failure happened, if known.
    """

    def __init__(self, message, node=None, op=None, step=None):
        super().__init__(message)
        self.node = node
        self.op = op
        self.step = step


class ShapeError(MetFlowError, ValueError):
    pass


class ConfigError(MetFlowError, ValueError):
    pass


class DomainError(MetFlowError, ValueError):
    pass


class ConvergenceError(MetFlowError, RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class CapacityError(MetFlowError, ValueError):
    pass
