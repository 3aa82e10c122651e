"""Exception hierarchy shared by every module."""


class GtaError(Exception):
    """Base class for all errors raised by this package."""


class BadParams(GtaError, ValueError):
    pass


class NonPositiveDepth(GtaError, ValueError):
    pass


class DimMismatch(GtaError, ValueError):
    pass


class DimNotDivisible(DimMismatch):
    pass


class LengthMismatch(GtaError, ValueError):
    pass


class DegenerateTrajectory(GtaError, ValueError):
    pass


class PoseMismatch(GtaError, ValueError):
    pass


class IndexOutOfRange(GtaError, IndexError):
    pass


class BadTimestep(GtaError, ValueError):
    pass


class ArchMismatch(GtaError, ValueError):
    pass


class EmptyDataset(GtaError, ValueError):
    pass


class NonFiniteLoss(GtaError, FloatingPointError):
    pass


class EmptyMask(GtaError, ValueError):
    pass


class TooSmall(GtaError, ValueError):
    pass


class IoError(GtaError, OSError):
    """Filesystem failure or a file too short to hold what its header claims."""


class BadMagic(GtaError, ValueError):
    pass


class UnsupportedVersion(GtaError, ValueError):
    pass


class ChecksumError(GtaError, ValueError):
    pass
