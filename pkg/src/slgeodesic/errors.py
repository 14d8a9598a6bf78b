"""Exception hierarchy shared by the solver pipeline."""


class GeodesicError(Exception):
    """Base class for every error raised by this package."""


class InputError(GeodesicError, ValueError):
    """Malformed numerical input (non-finite entries, wrong shapes, bad ranges)."""


class ConfigError(GeodesicError):
    """Invalid run configuration or grid too small for the stencils."""


class AdmissibilityViolation(GeodesicError):
    """Boundary data outside the admissible phase cone.

    Carries the endpoint (0 or 1), the flat node index on the torus grid and
    the offending raw phase value.
    """

    def __init__(self, message, endpoint=None, node=None, phase=None, margin=None):
        super().__init__(message)
        self.endpoint = endpoint
        self.node = node
        self.phase = phase
        self.margin = margin


class BarrierFailure(GeodesicError):
    """A sub- or supersolution could not be constructed or failed its check."""


class NoConvergence(GeodesicError):
    def __init__(self, message, iterations=0, residual=float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class StepCollapse(NoConvergence):
    """Backtracking reduced the Newton step below the damping floor."""
