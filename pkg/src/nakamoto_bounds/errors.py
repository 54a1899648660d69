"""Exception hierarchy shared by every module in the package."""


class DomainError(ValueError):
    """An input lies outside the domain of the requested operation."""


class FaultToleranceExceeded(DomainError):
    """The effective honest fraction p = rho * exp(-lambda * delta) is not above 1/2."""


class TrialBudgetError(DomainError):
    """A Monte Carlo run was requested with no trials."""


class InvariantViolation(AssertionError):
    """An internal consistency check failed; this indicates a bug, not bad input."""
