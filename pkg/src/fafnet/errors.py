"""Exception types raised across the package."""


class FafnetError(Exception):
    """Base class for all package errors."""


class ShapeError(FafnetError, ValueError):
    """Operand shapes are incompatible with an operation."""


class GradientCheckError(FafnetError):
    """A finite-difference probe could not be evaluated reliably."""


class FormatError(FafnetError):
    """Base class for on-disk container problems."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class ManifestError(FafnetError):
    """A dataset manifest refers to missing or corrupted files."""


class TrainingDiverged(FafnetError):
    """The loss or a gradient became non-finite."""
