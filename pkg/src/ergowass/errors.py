"""Exception hierarchy shared by all modules."""


class LabError(Exception):
    """Base class for every error raised by ergowass."""


class InputError(LabError, ValueError):
    """Malformed or out-of-range arguments."""


class DomainError(LabError, ValueError):
    """Mathematically undefined request (e.g. a divergent series)."""


class ResourceError(LabError):
    """Request exceeds a configured size cap."""


class NumericalError(LabError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(LabError):
    """Invalid experiment configuration."""
