"""Exception types raised across the package."""


class VoxAnimError(Exception):
    """Base class for all library errors."""


class PointBehindCamera(VoxAnimError):
    pass


class GimbalLock(VoxAnimError):
    pass


class DegenerateConfiguration(VoxAnimError):
    pass


class BehindCamera(VoxAnimError):
    pass


class InvalidStep(VoxAnimError):
    pass


class InconsistentParts(VoxAnimError):
    pass


class ShapeMismatch(VoxAnimError, ValueError):
    pass


class IndivisibleSize(VoxAnimError, ValueError):
    pass


class SingularAffine(VoxAnimError):
    pass


class DegenerateVariance(VoxAnimError):
    pass


class DegenerateDistance(VoxAnimError):
    pass


class KeypointOutOfBounds(VoxAnimError):
    pass


class NonFiniteDepth(VoxAnimError):
    pass


class NonFinite(VoxAnimError):
    """Raised on NaN/inf in data being written, or during optimization.

    ``step`` is set when the optimizer aborts.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InvalidSpec(VoxAnimError, ValueError):
    pass


class MalformedManifest(VoxAnimError):
    pass


class GridSizeMismatch(VoxAnimError):
    pass


class IoError(VoxAnimError, OSError):
    """File could not be read or written; ``filename`` names the culprit."""

    def __init__(self, message, filename=None):
        VoxAnimError.__init__(self, message)
        self.filename = filename
