"""Grid-valued domain types, NPY persistence, and resolution resampling.

Probability and feature grids are stored on disk as little-endian float32
NPY v1.0 files and promoted to float64 in memory; masks are uint8 on disk
and boolean in memory. All types are immutable after construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .errors import (
    IoFailure,
    MalformedFile,
    RangeViolation,
    ShapeMismatch,
    ZeroVector,
)

# Probabilities this far outside [0,1] are clamped on load (float32 export
# round-off); anything further out is rejected.
RANGE_TOLERANCE = 1e-6


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProbMap:
    """2D grid of foreground probabilities in [0, 1], float64 in memory."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeMismatch(f"probability map must be 2D, got shape {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise RangeViolation(
                f"probabilities outside [0,1]: min={v.min()}, max={v.max()}"
            )
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """2D grid of d-dimensional embedding vectors (shape H x W x d)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeMismatch(f"feature map must be H x W x d, got shape {v.shape}")
        norms = np.linalg.norm(v.reshape(-1, v.shape[2]), axis=1)
        if np.any(norms == 0.0):
            bad = int(np.argmax(norms == 0.0))
            raise ZeroVector(f"feature vector at linear index {bad} is all-zero")
        object.__setattr__(self, "vectors", _freeze(v))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class BinaryMask:
    """2D boolean grid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeMismatch(f"mask must be 2D, got shape {v.shape}")
        if v.dtype != np.bool_:
            uniq = np.unique(v)
            if not np.all(np.isin(uniq, (0, 1))):
                raise RangeViolation(f"mask values must be 0/1, found {uniq[:8]}")
            v = v.astype(bool)
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> int:
        """Number of foreground pixels."""
        return int(self.values.sum())


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    prob_path: Path
    feature_path: Path
    mask_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered list of per-sample tensor files; ids unique, files must exist."""

    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise MalformedFile(f"duplicate manifest ids: {dupes}")
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# --------------------------------------------------------------------------
# NPY persistence


def save_tensor(grid: ProbMap | FeatureMap | BinaryMask, path: str | Path) -> None:
    """Write a grid as an NPY v1.0 file (float32 for maps, uint8 for masks)."""
    if isinstance(grid, ProbMap):
        payload = grid.values.astype("<f4")
    elif isinstance(grid, FeatureMap):
        payload = grid.vectors.astype("<f4")
    elif isinstance(grid, BinaryMask):
        payload = grid.values.astype(np.uint8)
    else:
        raise ShapeMismatch(f"cannot save object of type {type(grid).__name__}")
    try:
        with open(path, "wb") as fp:
            npy_format.write_array(fp, payload, version=(1, 0))
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def load_tensor(path: str | Path) -> ProbMap | FeatureMap | BinaryMask:
    """Load a tensor file, dispatching on rank and dtype.

    float32 2D -> ProbMap, float32 3D -> FeatureMap, uint8 2D -> BinaryMask.
    Probabilities within RANGE_TOLERANCE of [0,1] are clamped; further out
    is a RangeViolation.
    """
    try:
        with open(path, "rb") as fp:
            arr = np.load(fp, allow_pickle=False)
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc
    except ValueError as exc:
        raise MalformedFile(f"{path} is not a valid NPY file: {exc}") from exc

    if arr.dtype == np.dtype("<f4") or arr.dtype == np.float32:
        if arr.ndim == 2:
            vals = arr.astype(np.float64)
            lo, hi = vals.min(), vals.max()
            if lo < -RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
                raise RangeViolation(
                    f"{path}: probabilities outside [0,1] beyond tolerance "
                    f"(min={lo}, max={hi})"
                )
            return ProbMap(np.clip(vals, 0.0, 1.0))
        if arr.ndim == 3:
            return FeatureMap(arr.astype(np.float64))
        raise ShapeMismatch(f"{path}: float32 tensor of rank {arr.ndim} unsupported")
    if arr.dtype == np.uint8:
        if arr.ndim == 2:
            return BinaryMask(arr)
        raise ShapeMismatch(f"{path}: uint8 tensor of rank {arr.ndim} unsupported")
    raise ShapeMismatch(f"{path}: dtype {arr.dtype} unsupported")


def _load_as(path: str | Path, kind: type, role: str):
    grid = load_tensor(path)
    if not isinstance(grid, kind):
        raise ShapeMismatch(
            f"{path}: expected a {kind.__name__} for {role}, "
            f"got {type(grid).__name__}"
        )
    return grid


def load_prob_map(path: str | Path) -> ProbMap:
    return _load_as(path, ProbMap, "probability map")


def load_feature_map(path: str | Path) -> FeatureMap:
    return _load_as(path, FeatureMap, "feature map")


def load_binary_mask(path: str | Path) -> BinaryMask:
    return _load_as(path, BinaryMask, "mask")


# --------------------------------------------------------------------------
# Manifest persistence


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a JSON manifest; paths are resolved relative to the manifest dir."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "entries" not in raw:
        raise MalformedFile(f"{path}: manifest must be an object with 'entries'")
    base = path.parent
    entries = []
    for rec in raw["entries"]:
        try:
            entry = ManifestEntry(
                id=str(rec["id"]),
                prob_path=base / rec["prob"],
                feature_path=base / rec["features"],
                mask_path=(base / rec["mask"]) if rec.get("mask") else None,
            )
        except (KeyError, TypeError) as exc:
            raise MalformedFile(f"{path}: bad manifest entry {rec!r}") from exc
        for p in (entry.prob_path, entry.feature_path, entry.mask_path):
            if p is not None and not p.is_file():
                raise IoFailure(f"{path}: referenced file does not exist: {p}")
        entries.append(entry)
    return DatasetManifest(tuple(entries))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest JSON with paths relative to its own directory."""
    path = Path(path)
    base = path.parent
    recs = []
    for e in manifest:
        rec = {
            "id": e.id,
            "prob": os.path.relpath(e.prob_path, base),
            "features": os.path.relpath(e.feature_path, base),
        }
        if e.mask_path is not None:
            rec["mask"] = os.path.relpath(e.mask_path, base)
        recs.append(rec)
    try:
        path.write_text(json.dumps({"entries": recs}, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Resampling


def _bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the pixel-center (half-pixel offset) convention."""
    src_h, src_w = values.shape
    if (out_h, out_w) == (src_h, src_w):
        return values.copy()
    # Output pixel centers mapped into source coordinates.
    ys = (np.arange(out_h) + 0.5) * (src_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (src_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, src_h - 1)
    y1c = np.clip(y0 + 1, 0, src_h - 1)
    x0c = np.clip(x0, 0, src_w - 1)
    x1c = np.clip(x0 + 1, 0, src_w - 1)

    top = values[y0c][:, x0c] * (1.0 - fx) + values[y0c][:, x1c] * fx
    bot = values[y1c][:, x0c] * (1.0 - fx) + values[y1c][:, x1c] * fx
    out = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    # Convex combination: clamp away round-off that escapes the source range.
    return np.clip(out, values.min(), values.max())


def resample_bilinear(src: ProbMap, out_h: int, out_w: int) -> ProbMap:
    """Resize a probability map; output stays within the source value range."""
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"target size must be >= 1, got {out_h} x {out_w}")
    return ProbMap(_bilinear(src.values, out_h, out_w))


def resample_nearest(src: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Resize a mask by nearest neighbor; output stays strictly binary."""
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"target size must be >= 1, got {out_h} x {out_w}")
    src_h, src_w = src.values.shape
    rows = np.minimum(
        ((np.arange(out_h) + 0.5) * (src_h / out_h)).astype(np.int64), src_h - 1
    )
    cols = np.minimum(
        ((np.arange(out_w) + 0.5) * (src_w / out_w)).astype(np.int64), src_w - 1
    )
    return BinaryMask(src.values[rows][:, cols])
