"""Exception types shared across the toolkit."""


class MotionSimError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MotionSimError):
    """Array shapes do not compose (wrong layer width, state size, ...)."""


class IntegrationError(MotionSimError):
    """ODE integration failed (step underflow, step budget, non-finite state).

    Carries the last good time and state so callers can report how far the
    solve got.
    """

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class FormatError(MotionSimError):
    """Binary file is not a valid dataset/checkpoint; ``offset`` is the byte
    position at which decoding failed."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class TrainingFault(MotionSimError):
    """Optimization cannot proceed (non-finite gradients, diverged loss)."""


class DensityFault(MotionSimError):
    """Flow evaluation produced a non-finite intermediate."""


class ConfigError(MotionSimError):
    """Run configuration is missing, malformed, or fails schema validation."""
