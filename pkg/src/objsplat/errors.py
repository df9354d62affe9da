"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for all objsplat errors."""


class AngleNearPi(SplatError):
    """Rotation angle too close to pi for a stable logarithm."""


class BehindCamera(SplatError):
    """Point lies behind (or numerically on) the camera plane."""


class UnknownCluster(SplatError):
    """Cluster id not present in the scene."""


class BadMagic(SplatError):
    """Scene file does not start with the expected magic bytes."""


class VersionMismatch(SplatError):
    """Scene file was written by an incompatible format version."""


class ChecksumMismatch(SplatError):
    """Scene file payload does not match its CRC32 trailer."""


class EmptyCloud(SplatError):
    """No valid points available to fuse or initialize from."""


class ShapeMismatch(SplatError):
    """Operands have incompatible array shapes."""


class NonPositiveScale(SplatError):
    """Physical scale must be strictly positive."""


class EmptyRoi(SplatError):
    """Cluster projects to an empty region of interest."""


class NoClusters(SplatError):
    """Scene has no object clusters."""


class InvalidSceneSpec(SplatError):
    """Synthetic scene specification violates its invariants."""


class DegenerateAxis(SplatError):
    """Free-axis objective is constant; solver angle is arbitrary."""
