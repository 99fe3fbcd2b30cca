"""Exception types raised across the package."""


class InvalidGeometryError(ValueError):
    """Spin positions that cannot define a coupling graph (e.g. coincident spins)."""


class CapacityError(ValueError):
    """Requested system size exceeds the configured limit of an engine."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IntegrationError(RuntimeError):
    """The trajectory integrator could not advance within its step limits."""


class UndefinedSqueezingError(ValueError):
    """Squeezing parameter requested for a state with zero mean spin length."""


class FitError(RuntimeError):
    """Curve fitting failed (empty window, non-convergence)."""

    def __init__(self, message, residual_trace=None):
        super().__init__(message)
        self.residual_trace = residual_trace or []


class MapConstructionError(ValueError):
    """T2 -> variance scatter is not monotone within tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ExtrapolationError(ValueError):
    """A T2 value lies outside the support of a variance map."""


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` points at the offending key."""

    def __init__(self, message, path=()):
        loc = ".".join(str(p) for p in path)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = tuple(path)
