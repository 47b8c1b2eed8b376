"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatError):
    """Bad user input (CLI exit code 1)."""


class BehindCamera(SplatError):
    pass


class EmptyInit(ValidationError):
    pass


class MissingContributors(SplatError):
    pass


class NonFiniteLoss(SplatError):
    pass


class DivergedLoss(SplatError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyMask(SplatError):
    pass


class EmptyVolume(SplatError):
    pass


class EmptySet(SplatError):
    pass


class DegenerateGeometry(SplatError):
    pass


class MissingFile(ValidationError):
    pass


class MalformedPose(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegenerateFit(UserWarning):
    """Albedo prediction is constant; the affine fit falls back to offset only."""
