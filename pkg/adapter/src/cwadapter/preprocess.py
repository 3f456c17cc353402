"""Image loading and intensity normalization.

Images are decoded with Pillow, converted to grayscale, clipped to
percentile bounds, and min-max scaled into [0, 1]. An optional resize
target (applied after clipping) standardizes heterogeneous inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BadSpec, UndecodableImage


@dataclass(frozen=True)
class Preprocess:
    clip_lo: float = 0.5
    clip_hi: float = 99.5
    resize: tuple[int, int] | None = None  # (height, width)

    def __post_init__(self):
        if not 0.0 <= self.clip_lo < self.clip_hi <= 100.0:
            raise BadSpec(
                f"clip percentiles must satisfy 0 <= lo < hi <= 100, "
                f"got ({self.clip_lo}, {self.clip_hi})"
            )
        if self.resize is not None and (self.resize[0] < 2 or self.resize[1] < 2):
            raise BadSpec(f"resize target must be at least 2x2, got {self.resize}")


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a grayscale float64 array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"{path}: {exc}") from exc


def preprocess_image(img: np.ndarray, pp: Preprocess) -> np.ndarray:
    """Clip to percentile bounds, scale to [0, 1], optionally resize."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise BadSpec(f"expected a grayscale image, got rank {img.ndim}")
    lo, hi = np.percentile(img, [pp.clip_lo, pp.clip_hi])
    clipped = np.clip(img, lo, hi)
    if hi > lo:
        out = (clipped - lo) / (hi - lo)
    else:
        out = np.zeros_like(clipped)  # constant image carries no signal
    if pp.resize is not None:
        h, w = pp.resize
        pil = Image.fromarray(out.astype(np.float32), mode="F")
        out = np.asarray(pil.resize((w, h), Image.BILINEAR), dtype=np.float64)
        out = np.clip(out, 0.0, 1.0)
    return out
