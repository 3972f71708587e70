"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Shapes or block layouts do not conform."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class ConfigurationError(ValueError):
    """An experiment or schedule configuration is invalid."""


class ConvergenceError(RuntimeError):
    """An inner iterative routine did not converge.

    The last available estimate is kept on ``estimate``.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class DivergenceError(RuntimeError):
    """The outer iteration produced a non-finite or exploding iterate."""

    def __init__(self, message, n=None, snapshot=None, trace=None):
        super().__init__(message)
        self.n = n
        self.snapshot = snapshot
        self.trace = trace


class ConditionViolation(ValueError):
    """A convergence hypothesis is violated; ``clause`` names it."""

    def __init__(self, message, clause=None):
        super().__init__(message)
        self.clause = clause


class ReproducibilityError(RuntimeError):
    """A sample ledger is used with an incompatible seed or sampler."""


class MissingAuditError(KeyError):
    """A trace lacks a field needed by a diagnostic."""
