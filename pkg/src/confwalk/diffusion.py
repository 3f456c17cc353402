"""Random-walk diffusion of probability maps over the similarity graph.

One step multiplies the flattened score vector by the row-stochastic
transition matrix; constants are preserved and the value range contracts.
The full pipeline resamples the score map down to the feature grid,
diffuses there, and resamples back up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .graph import GraphConfig, TransitionMatrix, build_transition_matrix
from .tensors import FeatureMap, ProbMap, resample_bilinear, save_tensor


@dataclass(frozen=True)
class DiffusionConfig:
    n_step: int = 10
    graph: GraphConfig = field(default_factory=GraphConfig)

    def __post_init__(self):
        if self.n_step < 0:
            raise ConfigError(f"n_step must be >= 0, got {self.n_step}")


def diffuse(s0: ProbMap, p: TransitionMatrix, n_step: int) -> ProbMap:
    """Apply n_step transition-matrix products to a score map.

    Accumulates in float64. Each step is clamped into the previous step's
    [min, max] so the mathematically guaranteed range contraction also
    holds bit-for-bit despite round-off.
    """
    if n_step < 0:
        raise ConfigError(f"n_step must be >= 0, got {n_step}")
    if s0.height * s0.width != p.num_pixels:
        raise DimensionMismatch(
            f"score map has {s0.height * s0.width} pixels, "
            f"matrix expects {p.num_pixels}"
        )
    vec = s0.values.ravel()
    for _ in range(n_step):
        lo, hi = vec.min(), vec.max()
        vec = p.matrix @ vec
        np.clip(vec, lo, hi, out=vec)
    return ProbMap(vec.reshape(s0.height, s0.width))


def diffuse_full(
    s0: ProbMap,
    features: FeatureMap,
    cfg: DiffusionConfig,
    debug_dir: str | Path | None = None,
) -> ProbMap:
    """Resample to the feature grid, diffuse, resample back.

    This resolution round-trip is the single sanctioned pathway: the walk
    always runs on the embedding grid. With debug_dir set, every
    intermediate step is dumped as a tensor file.
    """
    small = resample_bilinear(s0, features.height, features.width)
    tm = build_transition_matrix(features, cfg.graph)
    if debug_dir is None:
        diffused = diffuse(small, tm, cfg.n_step)
    else:
        debug_dir = Path(debug_dir)
        diffused = small
        save_tensor(diffused, debug_dir / "step_000.npy")
        for step in range(cfg.n_step):
            diffused = diffuse(diffused, tm, 1)
            save_tensor(diffused, debug_dir / f"step_{step + 1:03d}.npy")
    return resample_bilinear(diffused, s0.height, s0.width)
