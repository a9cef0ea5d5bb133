"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent parameters."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UsageError(ValueError):
    """Fields or operators combined in an unsupported way."""


class SolverError(RuntimeError):
    """A linear solve failed or produced non-finite values."""


class ContractViolation(RuntimeError):
    """Inputs are inconsistent with each other, e.g. fields solved for another coefficient."""


class CFLWarning(UserWarning):
    """Time step is large compared with the mesh size."""
