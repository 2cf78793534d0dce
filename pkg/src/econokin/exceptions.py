"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical invariant violations with 3 and I/O problems with 4.
"""


class EconokinError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ParameterError(EconokinError, ValueError):
    """A parameter lies outside the admissible range."""

    exit_code = 2


class DomainError(ParameterError):
    """An evaluation point lies outside the density's domain."""


class ConfigError(EconokinError):
    """An experiment configuration failed validation."""

    exit_code = 2


class InvariantViolation(EconokinError, ArithmeticError):
    """A numerical invariant (positivity, conservation, ...) was broken."""

    exit_code = 3


class NegativeDensityError(InvariantViolation):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class AcceptanceBoundError(InvariantViolation):
    """The per-sweep acceptance probability bound exceeded one."""


class ConvergenceError(InvariantViolation):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class AbsoluteContinuityError(InvariantViolation):
    """A density carries mass where the reference density vanishes."""
