"""Exception types shared across the toolkit."""


class ConfwalkError(Exception):
    """Base class for all toolkit errors."""


class MalformedFile(ConfwalkError):
    """File is not a readable tensor/manifest (bad magic, truncated header, ...)."""


class ShapeMismatch(ConfwalkError):
    """Tensor rank or dtype is not one of the supported grid layouts."""


class RangeViolation(ConfwalkError):
    """Grid values violate their domain (probability outside [0,1], mask not 0/1)."""


class ZeroVector(RangeViolation):
    """A feature vector has zero norm, so its cosine distance is undefined."""


class IoFailure(ConfwalkError):
    """Read or write failed at the filesystem level."""


class DimensionMismatch(ConfwalkError):
    """Paired grids (or a grid and a matrix) disagree on size."""


class DegenerateRow(ConfwalkError):
    """A transition-matrix row sums to zero and cannot be normalized."""


class TargetInfeasible(ConfwalkError):
    """The inflated risk target is negative: too few calibration samples."""


class Unsatisfiable(ConfwalkError):
    """No control value within the allowed range meets the risk target."""


class EmptyGroundTruth(ConfwalkError):
    """Ground-truth mask has no foreground pixels."""


class EmptyBasePrediction(ConfwalkError):
    """Base predicted mask is empty; stretch is undefined."""


class EmptyMask(ConfwalkError):
    """A contour/distance metric was asked for on an empty mask."""


class ConfigError(ConfwalkError):
    """Run configuration failed validation before any work started."""
