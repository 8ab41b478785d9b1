"""Exception types raised across the library.

All inherit from ValueError so generic callers may catch broadly while the
registration pipeline can map specific failures to report categories.
"""


class CurvRegError(ValueError):
    """Base class for library-specific errors."""


class CenterlineError(CurvRegError):
    """Invalid or degenerate centerline input."""


class OutOfExtentError(CurvRegError):
    """Warped longitudinal positions fall outside the centerline extent."""

    def __init__(self, message: str, frames=None):
        super().__init__(message)
        self.frames = list(frames) if frames is not None else []


class DegenerateMaskError(CurvRegError):
    """Too few unmasked bins for a meaningful similarity estimate."""


class DegenerateHistogramError(CurvRegError):
    """Constant image: intensity histogram carries no information."""


class NonFiniteLossError(CurvRegError):
    """A loss component evaluated to a non-finite value."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in component '{component}': {value}")
        self.component = component


class ConfigError(CurvRegError):
    """Invalid run configuration."""
