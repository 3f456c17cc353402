"""Synthetic segmentation populations for simulation and stability studies.

Scenes are unions of random disks. The ground-truth signed distance is
computed exactly from centers and radii, the probability map is a noisy
sigmoid of it, and features are region prototypes plus isotropic noise on
a coarser grid. All randomness derives from a counter-based seed split, so
any scene can be regenerated independently of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .conformal import (
    METHOD_CRC,
    METHOD_DILATION,
    METHOD_RWCP,
    METHODS,
    base_prediction,
    calibrate_threshold,
    crc_lower_bound,
    dilate_mask,
    dilation_calibrate,
    fnr_loss,
    inflated_target,
    predict_set,
)
from .diffusion import DiffusionConfig, diffuse_full
from .errors import ConfigError
from .tensors import BinaryMask, FeatureMap, ProbMap, resample_bilinear, resample_nearest

# Branch tags for the counter-based seed split, so plain scenes and sharp
# cases with the same (seed, index) never share a stream.
_BRANCH_SCENE = 0
_BRANCH_SHARP = 1


@dataclass(frozen=True)
class SceneSpec:
    grid: tuple[int, int] = (64, 64)
    feature_grid: tuple[int, int] = (16, 16)
    blob_count: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (6.0, 14.0)
    sharpness: float = 1.5
    logit_noise: float = 0.75
    label_noise: float = 0.0
    feature_dim: int = 8
    feature_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.grid[0] < 2 or self.grid[1] < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.grid}")
        if self.feature_grid[0] < 2 or self.feature_grid[1] < 2:
            raise ConfigError(
                f"feature grid must be at least 2x2, got {self.feature_grid}"
            )
        if self.blob_count[0] > self.blob_count[1] or self.blob_count[0] < 0:
            raise ConfigError(f"empty blob count range {self.blob_count}")
        if self.blob_radius[0] > self.blob_radius[1] or self.blob_radius[0] <= 0:
            raise ConfigError(f"empty blob radius range {self.blob_radius}")
        if self.sharpness <= 0:
            raise ConfigError(f"sharpness must be > 0, got {self.sharpness}")
        if self.logit_noise < 0 or self.feature_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError(f"label noise must be in [0,1), got {self.label_noise}")
        if self.feature_dim < 2:
            raise ConfigError(f"need feature_dim >= 2, got {self.feature_dim}")


def _rng(spec: SceneSpec, branch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(branch, index))
    )


def _signed_distance(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Exact signed distance to a random disk union, positive inside."""
    h, w = spec.grid
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    sdf = np.full((h, w), -np.inf)
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    for _ in range(count):
        radius = rng.uniform(*spec.blob_radius)
        # Keep the disk inside the frame so the mask is nonempty.
        cy = rng.uniform(min(radius, (h - 1) / 2), max(h - 1 - radius, (h - 1) / 2))
        cx = rng.uniform(min(radius, (w - 1) / 2), max(w - 1 - radius, (w - 1) / 2))
        sdf = np.maximum(sdf, radius - np.hypot(yy - cy, xx - cx))
    if count == 0:
        sdf = np.full((h, w), -1.0)
    return sdf


def _apply_label_noise(
    mask: np.ndarray, rate: float, rng: np.random.Generator
) -> np.ndarray:
    # Draw unconditionally so the stream layout does not depend on the rate.
    flips = rng.random(mask.shape) < rate
    return mask ^ flips


def _prototype_pair(dim: int) -> tuple[np.ndarray, np.ndarray]:
    fg = np.zeros(dim)
    bg = np.zeros(dim)
    fg[0] = 1.0
    bg[1] = 1.0
    return fg, bg


def gen_scene(spec: SceneSpec, index: int) -> tuple[ProbMap, FeatureMap, BinaryMask]:
    """Scene number `index` of the population defined by the spec.

    The probability map is a sigmoid of the sharpness-scaled signed
    distance plus logit noise; features carry one prototype per region
    (hard-assigned from the mask at feature resolution) plus isotropic
    noise.
    """
    rng = _rng(spec, _BRANCH_SCENE, index)
    sdf = _signed_distance(spec, rng)
    mask = sdf >= 0.0
    mask = _apply_label_noise(mask, spec.label_noise, rng)

    logits = spec.sharpness * sdf + spec.logit_noise * rng.standard_normal(sdf.shape)
    prob = np.clip(expit(logits), 0.0, 1.0)

    fh, fw = spec.feature_grid
    region = resample_nearest(BinaryMask(mask), fh, fw).values
    fg_proto, bg_proto = _prototype_pair(spec.feature_dim)
    feats = np.where(region[:, :, None], fg_proto, bg_proto)
    feats = feats + spec.feature_noise * rng.standard_normal((fh, fw, spec.feature_dim))

    return ProbMap(prob), FeatureMap(feats), BinaryMask(mask)


# Score bands for the sharp profile: each one narrower than a 0.005
# threshold step, so raw prediction sets jump by a whole band at once.
SHARP_HIGH_BAND = (0.9851, 0.9899)
SHARP_LOW_BAND = (0.0051, 0.0099)


def _smooth_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Low-frequency random field min-max normalized to [0, 1]."""
    h, w = shape
    yy = np.arange(h)[:, None] / h
    xx = np.arange(w)[None, :] / w
    field = np.zeros((h, w))
    for _ in range(3):
        py, px = rng.integers(1, 3, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.sin(2.0 * np.pi * (py * yy + px * xx) + phase)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)

# Fraction of the blend coordinate carried by mask occupancy; the rest is
# the smooth field, which keeps the value ranges of the two regions
# overlapping so the graph mixes them everywhere, not only at the border.
_SHARP_OCCUPANCY_WEIGHT = 0.3
# The sharp profile needs a low-noise feature manifold to stay connected
# under the sharp kernel; the scene's feature-noise level is scaled by this.
_SHARP_NOISE_SCALE = 0.1


def gen_sharp_case(
    spec: SceneSpec, index: int = 0
) -> tuple[ProbMap, FeatureMap, BinaryMask]:
    """Near-binary score profile over a smoothly varying feature field.

    Scores sit in two narrow bands ([0.98, 1] over foreground, [0, 0.02]
    over background), the regime where thresholding the raw map moves a
    whole band in or out of the set within a tiny lambda interval. The
    features blend the two prototypes by a mix of fractional mask occupancy
    and a smooth low-frequency field, so every neighborhood in the graph
    spans both score bands in varying proportions and diffusion spreads the
    bands into a continuum.
    """
    rng = _rng(spec, _BRANCH_SHARP, index)
    sdf = _signed_distance(spec, rng)
    mask = sdf >= 0.0

    lo_hi = SHARP_HIGH_BAND
    lo_lo = SHARP_LOW_BAND
    u = rng.random(mask.shape)
    prob = np.where(
        mask,
        lo_hi[0] + (lo_hi[1] - lo_hi[0]) * u,
        lo_lo[0] + (lo_lo[1] - lo_lo[0]) * u,
    )

    fh, fw = spec.feature_grid
    occupancy = resample_bilinear(ProbMap(mask.astype(np.float64)), fh, fw).values
    field = _smooth_field((fh, fw), rng)
    blend = _SHARP_OCCUPANCY_WEIGHT * occupancy + (1.0 - _SHARP_OCCUPANCY_WEIGHT) * field
    fg_proto, bg_proto = _prototype_pair(spec.feature_dim)
    feats = blend[:, :, None] * fg_proto + (1.0 - blend[:, :, None]) * bg_proto
    noise = _SHARP_NOISE_SCALE * spec.feature_noise
    feats = feats + noise * rng.standard_normal((fh, fw, spec.feature_dim))

    return ProbMap(prob), FeatureMap(feats), BinaryMask(mask)


def coverage_simulation(
    spec: SceneSpec,
    method: str,
    alpha: float,
    n_cal: int,
    n_test: int,
    trials: int,
    cfg: DiffusionConfig | None = None,
) -> dict:
    """Repeated calibrate-then-test runs on i.i.d. scene draws.

    Each trial draws n_cal + n_test fresh scenes, calibrates the chosen
    method on the first n_cal and reports the mean test FNR on the rest.
    The grand mean over trials estimates the controlled risk.
    """
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    if n_cal < 1 or n_test < 1 or trials < 1:
        raise ConfigError("n_cal, n_test and trials must all be >= 1")
    alpha_star = inflated_target(alpha, n_cal)  # raises early if infeasible
    if cfg is None:
        cfg = DiffusionConfig()

    per_trial = []
    block = n_cal + n_test
    for trial in range(trials):
        base = trial * block
        scenes = [gen_scene(spec, base + j) for j in range(block)]
        masks = [s[2] for s in scenes]

        if method == METHOD_DILATION:
            result = dilation_calibrate(
                [s[0] for s in scenes[:n_cal]], masks[:n_cal], alpha
            )
            count = int(result.lambda_hat)
            losses = [
                fnr_loss(masks[n_cal + j], dilate_mask(base_prediction(scenes[n_cal + j][0]), count))
                for j in range(n_test)
            ]
        else:
            if method == METHOD_RWCP:
                scores = [diffuse_full(p, f, cfg) for p, f, _ in scenes]
            else:
                scores = [s[0] for s in scenes]
            result = calibrate_threshold(
                scores[:n_cal], masks[:n_cal], alpha, method=method
            )
            losses = [
                fnr_loss(masks[n_cal + j], predict_set(scores[n_cal + j], result.lambda_hat))
                for j in range(n_test)
            ]
        per_trial.append(float(np.mean(losses)))

    return {
        "method": method,
        "alpha": alpha,
        "alpha_star": alpha_star,
        "n_cal": n_cal,
        "n_test": n_test,
        "trials": trials,
        "per_trial_fnr": per_trial,
        "grand_mean_fnr": float(np.mean(per_trial)),
        "risk_lower_bound": crc_lower_bound(alpha, n_cal),
    }


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
