"""Batch extraction: images in, tensor files plus manifest out.

The output directory receives `features/<id>.npy`, `probs/<id>.npy`, a
`manifest.json` in the consumer's schema (paths relative to the manifest),
and a `skipped.json` sidecar recording undecodable inputs. When a masks
directory is supplied, entries whose id has a matching `<id>.npy` there get
a mask reference, which is what the consumer's calibration command needs.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import get_encoder
from .errors import BadSpec, ExportFailure, UndecodableImage
from .preprocess import Preprocess, load_image, preprocess_image
from .tensor_io import save_float_grid

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _prob_intensity(img: np.ndarray) -> np.ndarray:
    return img


def _prob_zeros(img: np.ndarray) -> np.ndarray:
    return np.zeros_like(img)


# Stand-ins for a trained segmentation model: brightness-as-foreground, and
# the all-background baseline.
PROBABILITY_MODELS = {
    "intensity": _prob_intensity,
    "zeros": _prob_zeros,
}


@dataclass(frozen=True)
class ExtractionSpec:
    images_dir: Path
    out_dir: Path
    encoder: str = "local-descriptors"
    layer: str | None = None  # None selects the encoder's final layer
    patch_size: int = 16
    preprocess: Preprocess = field(default_factory=Preprocess)
    probability_model: str = "intensity"
    masks_dir: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "images_dir", Path(self.images_dir))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.masks_dir is not None:
            object.__setattr__(self, "masks_dir", Path(self.masks_dir))
        if self.patch_size < 1:
            raise BadSpec(f"patch size must be >= 1, got {self.patch_size}")
        if self.probability_model not in PROBABILITY_MODELS:
            raise BadSpec(
                f"unknown probability model {self.probability_model!r}; "
                f"available: {sorted(PROBABILITY_MODELS)}"
            )


def list_images(images_dir: Path) -> list[Path]:
    if not images_dir.is_dir():
        raise BadSpec(f"image directory {images_dir} does not exist")
    return sorted(
        p for p in images_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _entry_id(path: Path) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", path.stem)


def _atomic_json(payload, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w") as fp:
            fp.write(json.dumps(payload, indent=2) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise ExportFailure(f"failed to write {path}: {exc}") from exc


def extract_features(spec: ExtractionSpec) -> dict:
    """Run the encoder over every decodable image and write all outputs.

    Returns a summary dict with the manifest path, per-image ids, and the
    skipped-file record. Undecodable images are skipped with a warning and
    logged in the sidecar; they never abort the batch.
    """
    encoder = get_encoder(spec.encoder)
    layer = spec.layer if spec.layer is not None else encoder.final_layer
    prob_fn = PROBABILITY_MODELS[spec.probability_model]

    out = spec.out_dir
    entries = []
    skipped: dict[str, str] = {}
    for path in list_images(spec.images_dir):
        try:
            img = preprocess_image(load_image(path), spec.preprocess)
            feats = encoder.embed(img, spec.patch_size, layer)
        except (UndecodableImage, BadSpec) as exc:
            warnings.warn(f"skipping {path.name}: {exc}", stacklevel=2)
            skipped[path.name] = str(exc)
            continue
        eid = _entry_id(path)
        prob = np.clip(prob_fn(img), 0.0, 1.0)
        save_float_grid(feats, out / "features" / f"{eid}.npy")
        save_float_grid(prob, out / "probs" / f"{eid}.npy")
        record = {
            "id": eid,
            "prob": f"probs/{eid}.npy",
            "features": f"features/{eid}.npy",
        }
        if spec.masks_dir is not None:
            mask_file = spec.masks_dir / f"{eid}.npy"
            if mask_file.is_file():
                record["mask"] = os.path.relpath(mask_file, out)
        entries.append(record)

    manifest_path = out / "manifest.json"
    _atomic_json({"entries": entries}, manifest_path)
    _atomic_json(skipped, out / "skipped.json")
    return {
        "manifest": str(manifest_path),
        "ids": [e["id"] for e in entries],
        "encoder": spec.encoder,
        "layer": layer,
        "skipped": skipped,
    }


def export_probabilities(spec: ExtractionSpec, model: str) -> dict:
    """Rewrite `probs/<id>.npy` for every decodable image using `model`.

    The manifest references probability files by stable names, so swapping
    the model output does not require regenerating features.
    """
    if model not in PROBABILITY_MODELS:
        raise BadSpec(
            f"unknown probability model {model!r}; "
            f"available: {sorted(PROBABILITY_MODELS)}"
        )
    prob_fn = PROBABILITY_MODELS[model]
    written = {}
    for path in list_images(spec.images_dir):
        try:
            img = preprocess_image(load_image(path), spec.preprocess)
        except (UndecodableImage, BadSpec) as exc:
            warnings.warn(f"skipping {path.name}: {exc}", stacklevel=2)
            continue
        eid = _entry_id(path)
        target = spec.out_dir / "probs" / f"{eid}.npy"
        save_float_grid(np.clip(prob_fn(img), 0.0, 1.0), target)
        written[eid] = str(target)
    return {"model": model, "written": written}
