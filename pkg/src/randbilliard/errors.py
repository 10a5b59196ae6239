"""Exception hierarchy."""


class BilliardError(Exception):
    """Base class for all package errors."""


class DomainError(BilliardError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class SingularPoint(BilliardError):
    """Requested a normal/gradient at a kink of the boundary."""


class SingularHit(BilliardError):
    """A trajectory hit a kink or grazed the surface tangentially."""


class StalledMarch(BilliardError):
    """The marching root finder exceeded its step budget."""


class TrappedTrajectory(BilliardError):
    """A flight exceeded the collision cap without returning."""


class ResampleBudgetExceeded(BilliardError):
    """Too many consecutive degenerate draws for one scattering event."""


class NoConvergence(BilliardError):
    """A limit extrapolation failed its consistency check."""


class BudgetExceeded(BilliardError):
    """A requested Monte Carlo budget exceeds the configured cap."""


class StuckAtBoundary(BilliardError):
    """Euler-Maruyama could not keep the path inside its domain."""


class ConfigError(BilliardError, ValueError):
    """Invalid run configuration."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
