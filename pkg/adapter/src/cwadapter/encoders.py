"""Patch-level feature encoders.

Encoders turn a preprocessed grayscale image into an (H_f, W_f, d) grid of
patch descriptors. Each encoder exposes named layers; callers pick one or
take the encoder's final layer. The registry keys encoders by id string so
alternative backbones can be added without touching the extraction code.

The built-in `local-descriptors` encoder computes intensity and gradient
statistics per patch. It needs no model weights, runs identically on every
machine, and its descriptors carry a constant bias channel so no vector is
ever all-zero (the downstream cosine graph rejects zero vectors).
"""

from __future__ import annotations

import numpy as np

from .errors import BadSpec, EncoderUnavailable

_INTENSITY_STATS = 7  # mean, std, min, max, q25, median, q75
_GRADIENT_STATS = 5  # mean |gy|, mean |gx|, mean gy, mean gx, rms magnitude


def _patch_view(img: np.ndarray, patch: int) -> np.ndarray:
    """(H_f, W_f, patch*patch) view of the image, remainder rows/cols dropped."""
    h, w = img.shape
    hf, wf = h // patch, w // patch
    if hf < 2 or wf < 2:
        raise BadSpec(
            f"patch size {patch} leaves a {hf}x{wf} grid for a {h}x{w} image; "
            f"need at least 2x2 patches"
        )
    trimmed = img[: hf * patch, : wf * patch]
    return (
        trimmed.reshape(hf, patch, wf, patch)
        .transpose(0, 2, 1, 3)
        .reshape(hf, wf, patch * patch)
    )


def _intensity_stats(patches: np.ndarray) -> np.ndarray:
    q25, q50, q75 = np.percentile(patches, [25.0, 50.0, 75.0], axis=2)
    return np.stack(
        [
            patches.mean(axis=2),
            patches.std(axis=2),
            patches.min(axis=2),
            patches.max(axis=2),
            q25,
            q50,
            q75,
        ],
        axis=2,
    )


def _gradient_stats(img: np.ndarray, patch: int) -> np.ndarray:
    gy, gx = np.gradient(img)
    mag = np.hypot(gy, gx)
    planes = [np.abs(gy), np.abs(gx), gy, gx, mag**2]
    pooled = [_patch_view(p, patch).mean(axis=2) for p in planes]
    pooled[4] = np.sqrt(pooled[4])
    return np.stack(pooled, axis=2)


class LocalDescriptorEncoder:
    """Deterministic intensity/gradient statistics per patch."""

    name = "local-descriptors"
    layer_names = ("intensity", "gradient", "full")
    final_layer = "full"

    def dim(self, layer: str) -> int:
        base = {
            "intensity": _INTENSITY_STATS,
            "gradient": _GRADIENT_STATS,
            "full": _INTENSITY_STATS + _GRADIENT_STATS,
        }
        if layer not in base:
            raise BadSpec(
                f"encoder {self.name} has layers {self.layer_names}, got {layer!r}"
            )
        return base[layer] + 1  # constant bias channel

    def embed(self, img: np.ndarray, patch: int, layer: str) -> np.ndarray:
        if layer not in self.layer_names:
            raise BadSpec(
                f"encoder {self.name} has layers {self.layer_names}, got {layer!r}"
            )
        parts = []
        if layer in ("intensity", "full"):
            parts.append(_intensity_stats(_patch_view(img, patch)))
        if layer in ("gradient", "full"):
            parts.append(_gradient_stats(img, patch))
        feats = np.concatenate(parts, axis=2)
        bias = np.ones(feats.shape[:2] + (1,))
        return np.concatenate([feats, bias], axis=2)


_REGISTRY: dict[str, object] = {}


def register_encoder(encoder) -> None:
    _REGISTRY[encoder.name] = encoder


def get_encoder(name: str):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise EncoderUnavailable(
            f"no encoder {name!r}; available: {sorted(_REGISTRY)}"
        ) from None


def available_encoders() -> list[str]:
    return sorted(_REGISTRY)


register_encoder(LocalDescriptorEncoder())
