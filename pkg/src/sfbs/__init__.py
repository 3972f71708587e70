"""Stochastic forward-backward splitting with runtime hypothesis auditors."""

from .errors import (ConditionViolation, ConfigurationError, ConvergenceError, DivergenceError,
                     MissingAuditError, ParameterError, ReproducibilityError, StructuralError)

__version__ = "0.1.0"
