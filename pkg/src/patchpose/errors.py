"""Exception types shared across the pipeline."""


class PatchPoseError(Exception):
    """Base class for all library errors."""


class FormatError(PatchPoseError):
    """Malformed on-disk tensor container."""


class ValidationError(PatchPoseError, ValueError):
    """Inconsistent shapes, values or configuration."""


class DegenerateError(PatchPoseError):
    """Point configuration does not determine a unique rigid transform."""


class InsufficientError(PatchPoseError):
    """Too few correspondences to estimate a pose."""


class GenerationError(PatchPoseError):
    """Synthetic scene could not be generated for this seed."""


class EmptyMatchError(PatchPoseError):
    """Matching produced no correspondences at all."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
