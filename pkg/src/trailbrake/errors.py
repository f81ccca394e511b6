"""Exception types shared across the stack."""


class TrailbrakeError(Exception):
    """Base class for all package errors."""


class ValidationError(TrailbrakeError):
    """A config/parameter/track file failed schema or invariant checks."""


class WheelLiftError(TrailbrakeError):
    """A computed normal load went non-positive."""


class TireDomainError(TrailbrakeError):
    """Tire model called outside its domain (e.g. Fz <= 0)."""


class ProgressionError(TrailbrakeError):
    """Path progression rate sdot fell below its floor (stall or curvature singularity)."""


class TrackRangeError(TrailbrakeError):
    """Query outside an open track's covered s range."""


class ReferenceGenerationError(TrailbrakeError):
    """Speed-profile generation found no feasible profile."""


class GuessInvalidError(TrailbrakeError):
    """NLP initial guess produced NaN/Inf cost or constraints."""


class CalibrationError(TrailbrakeError):
    """Calibration log lacks the excitation needed to identify a parameter."""


class CommandError(TrailbrakeError):
    """No usable controller command is available (empty solution)."""
