"""Exception and warning types raised across the package."""


class IpiError(Exception):
    """Base class for all library errors."""


class ConfigurationError(IpiError, ValueError):
    pass


class PreconditionError(IpiError, ValueError):
    pass


class InsufficientExcitationError(IpiError):
    pass


class IdentifierDegradedError(IpiError):
    """Non-finite arithmetic in an RLS step; carries the last valid estimate."""

    def __init__(self, message, theta, cov):
        super().__init__(message)
        self.theta = theta
        self.cov = cov


class PolicyImprovementError(IpiError):
    pass


class OracleFailureError(IpiError):
    pass


class EvaluationDivergesError(OracleFailureError):
    pass


class BoundUndefinedError(IpiError):
    pass


class BundleError(IpiError):
    pass


class InputError(IpiError, ValueError):
    pass


class FitQualityWarning(UserWarning):
    pass
