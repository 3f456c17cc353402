"""Statistical-validity and geometric-quality metrics for mask pairs.

Surface distances (ASSD, HD95) run on contour point sets extracted with a
4-connected background test plus the image border, using the exact
Euclidean distance transform for point-to-set distances. Distances are in
pixel units; a scale factor maps them to physical units when needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    EmptyBasePrediction,
    EmptyGroundTruth,
    EmptyMask,
    RangeViolation,
)
from .tensors import BinaryMask

FLAG_EMPTY_TRUTH = "empty_truth"
FLAG_EMPTY_SET = "empty_set"
FLAG_EMPTY_BASE = "empty_base"


@dataclass(frozen=True)
class MetricReport:
    """Per-image metric row; degenerate quantities are NaN plus a flag."""

    coverage: float
    stretch: float
    dsc: float
    assd: float
    hd95: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("coverage", "dsc"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 1.0:
                raise RangeViolation(f"{name}={v} outside [0,1]")
        for name in ("stretch", "assd", "hd95"):
            v = getattr(self, name)
            if not np.isnan(v) and v < 0.0:
                raise RangeViolation(f"{name}={v} negative")

    @property
    def degenerate(self) -> bool:
        return len(self.flags) > 0


def _check_shapes(a: BinaryMask, b: BinaryMask) -> None:
    if a.values.shape != b.values.shape:
        raise DimensionMismatch(
            f"mask shapes differ: {a.values.shape} vs {b.values.shape}"
        )


def coverage(c: BinaryMask, y: BinaryMask) -> float:
    """Fraction of ground-truth foreground captured by the prediction set."""
    _check_shapes(c, y)
    total = int(y.values.sum())
    if total == 0:
        raise EmptyGroundTruth("coverage undefined for empty ground truth")
    return int((c.values & y.values).sum()) / total


def stretch(c: BinaryMask, y_hat: BinaryMask) -> float:
    """Prediction-set area relative to the base predicted mask."""
    _check_shapes(c, y_hat)
    base = int(y_hat.values.sum())
    if base == 0:
        raise EmptyBasePrediction("stretch undefined for empty base prediction")
    return int(c.values.sum()) / base


def dsc(c: BinaryMask, y: BinaryMask) -> float:
    """Dice overlap; two empty masks agree perfectly and score 1."""
    _check_shapes(c, y)
    size_c = int(c.values.sum())
    size_y = int(y.values.sum())
    if size_c + size_y == 0:
        return 1.0
    return 2.0 * int((c.values & y.values).sum()) / (size_c + size_y)


def extract_contour(mask: BinaryMask, connectivity: int = 4) -> np.ndarray:
    """(m, 2) row/col coordinates of the mask's contour pixels.

    A foreground pixel is on the contour when it touches background through
    the chosen connectivity or lies on the image border.
    """
    return np.argwhere(contour_mask(mask, connectivity))


def contour_mask(mask: BinaryMask, connectivity: int = 4) -> np.ndarray:
    if connectivity not in (4, 8):
        raise RangeViolation(f"connectivity must be 4 or 8, got {connectivity}")
    m = mask.values
    if not m.any():
        raise EmptyMask("contour undefined for an empty mask")
    # Padding with background makes the border rule fall out of the
    # neighbor test.
    pad = np.pad(m, 1)
    interior = (
        pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    )
    if connectivity == 8:
        interior &= (
            pad[:-2, :-2] & pad[:-2, 2:] & pad[2:, :-2] & pad[2:, 2:]
        )
    return m & ~interior


def surface_distances(
    a: BinaryMask, b: BinaryMask, connectivity: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Directed contour distances (a's contour to b's, and b's to a's)."""
    _check_shapes(a, b)
    ca = contour_mask(a, connectivity)
    cb = contour_mask(b, connectivity)
    # Distance transform of the complement gives, at every pixel, the exact
    # Euclidean distance to the nearest contour pixel.
    dist_to_b = ndimage.distance_transform_edt(~cb)
    dist_to_a = ndimage.distance_transform_edt(~ca)
    return dist_to_b[ca], dist_to_a[cb]


def assd(
    a: BinaryMask, b: BinaryMask, connectivity: int = 4, scale: float = 1.0
) -> float:
    """Average of all directed contour distances, both directions pooled."""
    d_ab, d_ba = surface_distances(a, b, connectivity)
    return scale * float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def _pooled_percentile(a: BinaryMask, b: BinaryMask, q: float, connectivity: int) -> float:
    d_ab, d_ba = surface_distances(a, b, connectivity)
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, q, method="linear"))


def hd95(
    a: BinaryMask, b: BinaryMask, connectivity: int = 4, scale: float = 1.0
) -> float:
    """95th percentile of the pooled directed contour distances.

    Both directed distance multisets are pooled before the percentile;
    linear interpolation between order statistics.
    """
    return scale * _pooled_percentile(a, b, 95.0, connectivity)


def hd100(
    a: BinaryMask, b: BinaryMask, connectivity: int = 4, scale: float = 1.0
) -> float:
    """Exact (symmetric) Hausdorff distance: the max directed distance."""
    d_ab, d_ba = surface_distances(a, b, connectivity)
    return scale * float(max(d_ab.max(), d_ba.max()))


def evaluate_pair(
    c: BinaryMask,
    y: BinaryMask,
    y_hat: BinaryMask | None = None,
    connectivity: int = 4,
    scale: float = 1.0,
) -> MetricReport:
    """Full metric row for one (prediction set, ground truth) pair.

    Degenerate cases (empty ground truth, empty set, empty base mask) are
    flagged and the affected metrics reported as NaN instead of raising.
    """
    _check_shapes(c, y)
    flags = []
    c_empty = not c.values.any()
    y_empty = not y.values.any()

    if y_empty:
        flags.append(FLAG_EMPTY_TRUTH)
        cov = float("nan")
    else:
        cov = coverage(c, y)

    if y_hat is None:
        st = float("nan")
    else:
        try:
            st = stretch(c, y_hat)
        except EmptyBasePrediction:
            flags.append(FLAG_EMPTY_BASE)
            st = float("nan")

    d = dsc(c, y)

    if c_empty:
        flags.append(FLAG_EMPTY_SET)
    if c_empty or y_empty:
        sd = float("nan")
        h95 = float("nan")
    else:
        sd = assd(c, y, connectivity, scale)
        h95 = hd95(c, y, connectivity, scale)

    return MetricReport(
        coverage=cov, stretch=st, dsc=d, assd=sd, hd95=h95, flags=tuple(flags)
    )


def summarize(reports: list[MetricReport]) -> dict:
    """Aggregate mean and std per metric, skipping NaN-flagged entries."""
    out: dict = {"n": len(reports)}
    for name in ("coverage", "stretch", "dsc", "assd", "hd95"):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size:
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        else:
            out[name] = {"mean": None, "std": None}
    out["n_degenerate"] = sum(1 for r in reports if r.degenerate)
    return out
