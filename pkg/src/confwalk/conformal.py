"""Risk-controlled threshold calibration and prediction-set construction.

Calibration finds the smallest control value (score threshold, or dilation
count for the margin baseline) whose empirical false-negative rate on the
calibration set stays at or below the finite-sample inflated target
alpha_star = ((n+1)/n) * alpha - 1/n. The thresholding route sweeps the
exact finite set of achievable thresholds rather than a grid, so the
returned value realizes the true infimum.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffusion import DiffusionConfig, diffuse_full
from .errors import (
    ConfigError,
    DimensionMismatch,
    IoFailure,
    MalformedFile,
    RangeViolation,
    TargetInfeasible,
    Unsatisfiable,
)
from .tensors import (
    BinaryMask,
    DatasetManifest,
    ProbMap,
    load_binary_mask,
    load_feature_map,
    load_prob_map,
)

METHOD_RWCP = "rwcp"
METHOD_CRC = "crc"
METHOD_DILATION = "dilation"
METHODS = (METHOD_RWCP, METHOD_CRC, METHOD_DILATION)

# Structuring element for the dilation baseline: 3x3, 8-connected.
DILATION_STRUCTURE = np.ones((3, 3), dtype=bool)
DEFAULT_MAX_DILATIONS = 200


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float
    method: str = METHOD_RWCP
    loss_bound: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0,1), got {self.alpha}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass(frozen=True)
class RiskCurve:
    """Empirical risk as a step function of the control value.

    levels are strictly increasing; risks are non-increasing (prediction
    sets are nested, so the loss is monotone).
    """

    levels: np.ndarray
    risks: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        risks = np.asarray(self.risks, dtype=np.float64)
        if levels.shape != risks.shape or levels.ndim != 1 or levels.size == 0:
            raise RangeViolation("risk curve needs matching 1D levels and risks")
        if np.any(np.diff(levels) <= 0.0):
            raise RangeViolation("risk-curve levels must be strictly increasing")
        if np.any(np.diff(risks) > 0.0):
            raise RangeViolation("empirical risk must be non-increasing in the level")
        levels.setflags(write=False)
        risks.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "risks", risks)

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated control value with its risk curve and provenance."""

    lambda_hat: float
    alpha: float
    alpha_star: float
    n: int
    method: str
    config_hash: str
    curve: RiskCurve

    def __post_init__(self):
        idx = int(np.searchsorted(self.curve.levels, self.lambda_hat))
        if (
            idx >= len(self.curve)
            or self.curve.levels[idx] != self.lambda_hat
            or self.curve.risks[idx] > self.alpha_star
        ):
            raise RangeViolation(
                f"lambda_hat={self.lambda_hat} does not meet the target "
                f"{self.alpha_star} on its own curve"
            )
        if idx > 0 and self.curve.risks[idx - 1] <= self.alpha_star:
            raise RangeViolation(
                f"lambda_hat={self.lambda_hat} is not minimal: "
                f"level {self.curve.levels[idx - 1]} already meets the target"
            )

    @property
    def achieved_risk(self) -> float:
        idx = int(np.searchsorted(self.curve.levels, self.lambda_hat))
        return float(self.curve.risks[idx])


# --------------------------------------------------------------------------
# Loss and targets


def fnr_loss(y: BinaryMask, c: BinaryMask) -> float:
    """Fraction of true foreground pixels missing from the prediction set.

    Empty ground truth imposes no coverage obligation and scores 0.
    """
    if y.values.shape != c.values.shape:
        raise DimensionMismatch(
            f"mask shapes differ: {y.values.shape} vs {c.values.shape}"
        )
    total = int(y.values.sum())
    if total == 0:
        return 0.0
    covered = int((y.values & c.values).sum())
    return 1.0 - covered / total


def inflated_target(alpha: float, n: int) -> float:
    """Finite-sample risk target ((n+1)/n) * alpha - 1/n."""
    if n < 1:
        raise ConfigError(f"calibration size must be >= 1, got {n}")
    alpha_star = ((n + 1) / n) * alpha - 1.0 / n
    if alpha_star < 0.0:
        raise TargetInfeasible(
            f"alpha={alpha} with n={n} gives inflated target {alpha_star} < 0; "
            f"need n >= {min_calibration_size(alpha, 1.0)} calibration samples"
        )
    return alpha_star


def min_calibration_size(alpha: float, loss_bound: float) -> int:
    """Smallest integer n with n >= loss_bound / alpha - 1."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    if loss_bound < 0.0:
        raise ConfigError(f"loss bound must be >= 0, got {loss_bound}")
    if loss_bound == 0.0:
        return 0
    ratio = loss_bound / alpha
    # Snap float dust onto integers so e.g. 1/0.05 counts as exactly 20.
    if abs(ratio - round(ratio)) < 1e-9:
        ratio = round(ratio)
    return max(0, math.ceil(ratio) - 1)


def crc_lower_bound(alpha: float, n: int, loss_bound: float = 1.0) -> float:
    """Diagnostic lower bound alpha - 2B/(n+1) on the expected risk.

    Only meaningful for i.i.d. losses and non-degenerate risk curves;
    reported, never asserted.
    """
    return alpha - 2.0 * loss_bound / (n + 1)


# --------------------------------------------------------------------------
# Prediction sets and exact threshold calibration


def predict_set(scores: ProbMap, lam: float) -> BinaryMask:
    """Pixels whose score is >= 1 - lam (inclusive)."""
    if not 0.0 <= lam <= 1.0:
        raise RangeViolation(f"lambda must be in [0,1], got {lam}")
    return BinaryMask(scores.values >= 1.0 - lam)


def _sorted_foreground_scores(
    score_maps: list[ProbMap], masks: list[BinaryMask]
) -> list[np.ndarray]:
    per_image = []
    for s, y in zip(score_maps, masks):
        if s.values.shape != y.values.shape:
            raise DimensionMismatch(
                f"score map {s.values.shape} vs mask {y.values.shape}"
            )
        per_image.append(np.sort(s.values[y.values]))
    return per_image


def calibrate_threshold(
    score_maps: list[ProbMap],
    masks: list[BinaryMask],
    alpha: float,
    *,
    method: str = METHOD_CRC,
    config_hash: str = "",
) -> CalibrationResult:
    """Exact infimum threshold whose empirical FNR meets the inflated target.

    The empirical risk is a right-continuous step function of the threshold
    that only jumps where 1 - lambda crosses a foreground score, so sweeping
    the finite candidate set {0} | {1 - s : s foreground score} | {1}
    realizes the infimum with no grid error.
    """
    if len(score_maps) == 0 or len(score_maps) != len(masks):
        raise ConfigError(
            f"need equal-length non-empty lists, got {len(score_maps)} score "
            f"maps and {len(masks)} masks"
        )
    n = len(score_maps)
    alpha_star = inflated_target(alpha, n)
    fg_scores = _sorted_foreground_scores(score_maps, masks)

    pool = np.unique(np.concatenate(fg_scores)) if any(
        s.size for s in fg_scores
    ) else np.empty(0)
    cands = 1.0 - pool
    # 1 - (1 - s) can exceed s by one ulp for s < 0.5; nudge those candidates
    # up so each one covers its own score under the >= 1 - lambda rule.
    short = (1.0 - cands) > pool
    cands[short] = np.nextafter(cands[short], 1.0)
    levels = np.unique(np.concatenate([np.array([0.0, 1.0]), cands]))
    thresholds = 1.0 - levels

    # Mean FNR at every candidate, evaluated exactly as predict_set would:
    # count foreground scores >= 1 - lambda.
    total_fnr = np.zeros(len(levels))
    for fg in fg_scores:
        if fg.size == 0:
            continue  # empty ground truth contributes loss 0
        covered = fg.size - np.searchsorted(fg, thresholds, side="left")
        total_fnr += 1.0 - covered / fg.size
    risks = total_fnr / n

    feasible = np.nonzero(risks <= alpha_star)[0]
    if feasible.size == 0:  # cannot occur for FNR: lambda=1 has risk 0
        raise Unsatisfiable(
            f"no threshold meets target {alpha_star}; min risk {risks.min()}"
        )
    idx = int(feasible[0])
    return CalibrationResult(
        lambda_hat=float(levels[idx]),
        alpha=alpha,
        alpha_star=alpha_star,
        n=n,
        method=method,
        config_hash=config_hash,
        curve=RiskCurve(levels=levels, risks=risks),
    )


# --------------------------------------------------------------------------
# Pipeline provenance


def config_digest(method: str, cfg: DiffusionConfig | None = None, **extra) -> str:
    """Stable hash of the scoring pipeline's identity.

    Covers everything that must match between calibration and inference:
    method, graph parameters, step count, and the resampling policy (the
    walk always runs at each image's native feature-grid resolution).
    """
    payload: dict = {"method": method}
    if cfg is not None:
        payload.update(
            k=cfg.graph.k,
            beta=cfg.graph.beta,
            n_step=cfg.n_step,
            resolution="native-feature-grid/bilinear-halfpixel",
        )
    payload.update(extra)
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_hash(expected: str | None, actual: str, method: str) -> None:
    if expected is not None and expected != actual:
        warnings.warn(
            f"{method} inference config hash {actual} does not match the "
            f"calibration's {expected}; the risk guarantee does not transfer",
            stacklevel=3,
        )


# --------------------------------------------------------------------------
# Method front ends


def _load_calibration_triples(manifest: DatasetManifest):
    for entry in manifest:
        if entry.mask_path is None:
            raise ConfigError(f"manifest entry {entry.id!r} has no mask")
    probs = [load_prob_map(e.prob_path) for e in manifest]
    feats = [load_feature_map(e.feature_path) for e in manifest]
    masks = [load_binary_mask(e.mask_path) for e in manifest]
    return probs, feats, masks


def _map_workers(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def rwcp_calibrate(
    manifest: DatasetManifest,
    cfg: DiffusionConfig,
    alpha: float,
    workers: int = 1,
) -> CalibrationResult:
    """Diffuse every calibration score map, then calibrate the threshold."""
    probs, feats, masks = _load_calibration_triples(manifest)
    diffused = _map_workers(
        lambda pair: diffuse_full(pair[0], pair[1], cfg),
        list(zip(probs, feats)),
        workers,
    )
    return calibrate_threshold(
        diffused,
        masks,
        alpha,
        method=METHOD_RWCP,
        config_hash=config_digest(METHOD_RWCP, cfg),
    )


def rwcp_infer(
    prob: ProbMap,
    features,
    cfg: DiffusionConfig,
    lambda_hat: float,
    config_hash: str | None = None,
) -> BinaryMask:
    """Diffuse a test score map and threshold it at the calibrated level."""
    _check_hash(config_hash, config_digest(METHOD_RWCP, cfg), METHOD_RWCP)
    return predict_set(diffuse_full(prob, features, cfg), lambda_hat)


def standard_crc_calibrate(
    score_maps: list[ProbMap], masks: list[BinaryMask], alpha: float
) -> CalibrationResult:
    """Threshold calibration on raw score maps, no diffusion or resampling."""
    return calibrate_threshold(
        score_maps,
        masks,
        alpha,
        method=METHOD_CRC,
        config_hash=config_digest(METHOD_CRC),
    )


def standard_crc_infer(
    prob: ProbMap, lambda_hat: float, config_hash: str | None = None
) -> BinaryMask:
    _check_hash(config_hash, config_digest(METHOD_CRC), METHOD_CRC)
    return predict_set(prob, lambda_hat)


def base_prediction(prob: ProbMap) -> BinaryMask:
    """Plain argmax mask: score >= 0.5."""
    return BinaryMask(prob.values >= 0.5)


def dilate_mask(mask: BinaryMask, count: int) -> BinaryMask:
    """Apply count 3x3 8-connected binary dilations."""
    if count < 0:
        raise RangeViolation(f"dilation count must be >= 0, got {count}")
    if count == 0 or not mask.values.any():
        return mask
    out = ndimage.binary_dilation(
        mask.values, structure=DILATION_STRUCTURE, iterations=count
    )
    return BinaryMask(out)


def dilation_calibrate(
    prob_maps: list[ProbMap],
    masks: list[BinaryMask],
    alpha: float,
    max_dilations: int = DEFAULT_MAX_DILATIONS,
) -> CalibrationResult:
    """Smallest dilation count of the base masks meeting the inflated target.

    The calibrated control value is the integer dilation count, stored in
    lambda_hat; it is not confined to [0,1] like the threshold methods.
    """
    if len(prob_maps) == 0 or len(prob_maps) != len(masks):
        raise ConfigError(
            f"need equal-length non-empty lists, got {len(prob_maps)} score "
            f"maps and {len(masks)} masks"
        )
    n = len(prob_maps)
    alpha_star = inflated_target(alpha, n)
    current = [base_prediction(p).values for p in prob_maps]
    y_arrays = [y.values for y in masks]
    for y, c in zip(y_arrays, current):
        if y.shape != c.shape:
            raise DimensionMismatch(f"mask shapes differ: {y.shape} vs {c.shape}")

    levels, risks = [], []
    chosen = None
    for m in range(max_dilations + 1):
        if m > 0:
            current = [
                ndimage.binary_dilation(c, structure=DILATION_STRUCTURE)
                if c.any()
                else c
                for c in current
            ]
        total = 0.0
        for y, c in zip(y_arrays, current):
            fg = int(y.sum())
            if fg:
                total += 1.0 - int((y & c).sum()) / fg
        risk = total / n
        levels.append(float(m))
        risks.append(risk)
        if risk <= alpha_star:
            chosen = m
            break
    if chosen is None:
        raise Unsatisfiable(
            f"risk is still {risks[-1]:.4f} > {alpha_star:.4f} after "
            f"{max_dilations} dilations"
        )
    return CalibrationResult(
        lambda_hat=float(chosen),
        alpha=alpha,
        alpha_star=alpha_star,
        n=n,
        method=METHOD_DILATION,
        config_hash=config_digest(METHOD_DILATION, structuring="3x3-8conn"),
        curve=RiskCurve(levels=np.array(levels), risks=np.array(risks)),
    )


def dilation_infer(
    prob: ProbMap, count: float, config_hash: str | None = None
) -> BinaryMask:
    _check_hash(
        config_hash,
        config_digest(METHOD_DILATION, structuring="3x3-8conn"),
        METHOD_DILATION,
    )
    return dilate_mask(base_prediction(prob), int(count))


# --------------------------------------------------------------------------
# Set-size stability


def set_size_curve(
    scores: ProbMap, step: float = 0.005
) -> tuple[np.ndarray, np.ndarray]:
    """|predict_set(scores, lambda)| on a uniform lambda grid over [0, 1]."""
    if not 0.0 < step <= 1.0:
        raise ConfigError(f"grid step must be in (0,1], got {step}")
    lambdas = np.linspace(0.0, 1.0, round(1.0 / step) + 1)
    flat = np.sort(scores.values, axis=None)
    sizes = flat.size - np.searchsorted(flat, 1.0 - lambdas, side="left")
    return lambdas, sizes.astype(np.int64)


def max_set_size_sensitivity(scores: ProbMap, step: float = 0.005) -> float:
    """Largest per-step set-size change rate, max |d|C_lambda|| / d lambda."""
    lambdas, sizes = set_size_curve(scores, step)
    return float(np.max(np.abs(np.diff(sizes)) / np.diff(lambdas)))


# --------------------------------------------------------------------------
# Serialization


def calibration_to_dict(result: CalibrationResult) -> dict:
    return {
        "lambda_hat": result.lambda_hat,
        "alpha": result.alpha,
        "alpha_star": result.alpha_star,
        "n": result.n,
        "method": result.method,
        "config_hash": result.config_hash,
        "curve": [[float(l), float(r)] for l, r in zip(result.curve.levels, result.curve.risks)],
    }


def calibration_from_dict(data: dict) -> CalibrationResult:
    try:
        curve = np.asarray(data["curve"], dtype=np.float64).reshape(-1, 2)
        return CalibrationResult(
            lambda_hat=float(data["lambda_hat"]),
            alpha=float(data["alpha"]),
            alpha_star=float(data["alpha_star"]),
            n=int(data["n"]),
            method=str(data["method"]),
            config_hash=str(data["config_hash"]),
            curve=RiskCurve(levels=curve[:, 0], risks=curve[:, 1]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad calibration record: {exc}") from exc


def save_calibration(result: CalibrationResult, path: str | Path) -> None:
    try:
        Path(path).write_text(
            json.dumps(calibration_to_dict(result), sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def load_calibration(path: str | Path) -> CalibrationResult:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path} is not valid JSON: {exc}") from exc
    return calibration_from_dict(raw)
