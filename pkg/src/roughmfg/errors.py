"""Exception taxonomy shared by all solvers.

ConfigError covers every rejection that happens before numerics start
(bad shapes, bad grids, violated standing assumptions).  NumericalError
covers degeneracies detected while stepping (singular flows, Riccati
blow-up).  The CLI maps these to exit codes 2 and 3 respectively.
"""


class ConfigError(ValueError):
    """Invalid configuration, shapes, grids, or data."""


class AssumptionError(ConfigError):
    """A standing assumption fails; the message names it, e.g. "(S3): ..."."""


class NumericalError(RuntimeError):
    """Numerical degeneracy or divergence detected during a solve."""
