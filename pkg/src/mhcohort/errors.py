"""Exception hierarchy shared across the package."""


class MHCohortError(Exception):
    """Base class for all package errors."""


class CohortError(MHCohortError, ValueError):
    """Malformed event records or an inconsistent cohort."""


class NotAtRiskError(CohortError):
    """A subject was queried at a time it is not under observation."""


class DesignError(MHCohortError, ValueError):
    """Invalid sampling design or a design that cannot be applied."""


class DeficientStratumError(DesignError):
    """A stratum holds fewer subjects at risk than the design requires."""


class DegenerateEstimateError(MHCohortError, ArithmeticError):
    """The data carry no information for a finite, positive rate ratio.

    ``reason`` is a short machine-readable tag such as ``"zero_estimate"``.
    """

    def __init__(self, message: str, reason: str = "no_information"):
        super().__init__(message)
        self.reason = reason


class NotPositiveDefiniteError(MHCohortError, ArithmeticError):
    """A covariance matrix needed for optimal weights is not positive definite."""
