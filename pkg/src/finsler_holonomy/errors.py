"""Exception hierarchy.  CLI exit codes hang off these classes."""


class FinslerError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigError(FinslerError):
    exit_code = 2


class JetError(FinslerError):
    """Malformed jet request (unsupported order, incompatible spaces, ...)."""

    exit_code = 4


class JetDomainError(JetError):
    """sqrt/pow/division evaluated outside its domain."""


class ExpressionError(ConfigError):
    """Model or vector-field expression could not be parsed."""


class DegenerateMetricError(FinslerError):
    """Fundamental tensor is singular or not positive definite."""

    exit_code = 3

    def __init__(self, message, min_eigenvalue=None, point=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.point = point


class FieldDepthError(FinslerError):
    """A field expression exceeded the nesting cap."""

    exit_code = 2


class IntegrationError(FinslerError):
    """ODE integration failed (step-size underflow, step budget, drift)."""

    exit_code = 4


class ChartError(IntegrationError):
    """Curve left the chart's validity region."""
