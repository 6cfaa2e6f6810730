"""Exception types raised across the package.

Every error carries a short class name that doubles as the diagnostic tag
printed by the CLI, so callers can match on type rather than message text.
"""


class Pri3DError(Exception):
    """Base class for all package errors."""


# geometry
class InvalidDepth(Pri3DError):
    pass


class OutOfBounds(Pri3DError):
    pass


class BehindCamera(Pri3DError):
    pass


class OutOfView(Pri3DError):
    pass


class InvalidPose(Pri3DError):
    pass


class InvalidIntrinsics(Pri3DError):
    pass


class FrameMismatch(Pri3DError):
    pass


# mining / geo prior
class ZeroValidPixels(Pri3DError):
    pass


class NoValidDepth(Pri3DError):
    pass


# contrastive core
class EmptyMatchSet(Pri3DError):
    pass


class NonFiniteFeature(Pri3DError):
    pass


class OddDimensions(Pri3DError):
    pass


class NormalizationOfZeroVector(Pri3DError):
    pass


class EmptyChunk(Pri3DError):
    pass


class DivergenceDetected(Pri3DError):
    pass


class InvalidConfig(Pri3DError):
    pass


# io
class MissingFile(Pri3DError):
    pass


class MalformedPose(Pri3DError):
    pass


class MalformedManifest(Pri3DError):
    pass


class MalformedImage(Pri3DError):
    pass


class DepthSizeMismatch(Pri3DError):
    pass


class BadMagic(Pri3DError):
    pass


class UnsupportedVersion(Pri3DError):
    pass


class TruncatedFile(Pri3DError):
    pass
