"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Scenario or grid configuration that cannot be used (bad weights, bad JSON values)."""


class PreconditionError(ValueError):
    """An operation was called with inputs violating its contract."""


class BudgetExceeded(RuntimeError):
    """Estimated Monte Carlo cost exceeds the configured cap."""


class SimulationRejected(RuntimeError):
    """Too many paths breached positivity for the run to be trusted."""


class SingularHedgeMatrix(RuntimeError):
    """The bond-volatility matrix used for a finite-factor hedge is numerically singular."""
