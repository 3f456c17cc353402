"""NPY v1.0 writers matching the segmentation toolkit's tensor contract.

The consumer expects little-endian float32 for probability and feature
grids and uint8 for masks, always in NPY format version 1.0. Files are
written atomically (temp + rename) so a crashed export never leaves a
truncated tensor behind.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .errors import ExportFailure


def _atomic_write(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fp:
            npy_format.write_array(fp, np.ascontiguousarray(arr), version=(1, 0))
        os.replace(tmp, path)
    except OSError as exc:
        raise ExportFailure(f"failed to write {path}: {exc}") from exc


def save_float_grid(values: np.ndarray, path: str | Path) -> None:
    """Write a rank-2 probability grid or rank-3 feature grid as <f4."""
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise ExportFailure(f"float grid must be rank 2 or 3, got {values.ndim}")
    _atomic_write(values.astype("<f4"), Path(path))


def save_mask_grid(values: np.ndarray, path: str | Path) -> None:
    """Write a rank-2 binary mask as uint8 zeros and ones."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ExportFailure(f"mask must be rank 2, got {values.ndim}")
    _atomic_write((values != 0).astype(np.uint8), Path(path))
