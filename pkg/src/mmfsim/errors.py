"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures (bad state, solver breakdown, NaN) with 3,
and IO errors with 4.
"""


class MmfsimError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MmfsimError):
    """Invalid or inconsistent user-facing configuration."""


class StateError(MmfsimError):
    """Physically inadmissible state (vacuum, negative mixing ratio, NaN)."""


class SolverError(MmfsimError):
    """Iterative solver failure; carries the final residual when known."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
