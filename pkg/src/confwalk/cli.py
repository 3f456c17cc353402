"""Command-line surface: calibrate, infer, evaluate, simulate, stability.

Every command reads an optional TOML config whose keys match the long flag
names; explicitly passed flags win over config values, which win over
defaults. Human-readable progress goes to stderr; stdout carries JSON only
when --json is set. Exit codes: 2 bad configuration, 3 infeasible risk
target, 4 file I/O or malformed data.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import conformal, metrics
from .conformal import (
    METHOD_CRC,
    METHOD_DILATION,
    METHOD_RWCP,
    METHODS,
    CalibrationResult,
    base_prediction,
    calibration_to_dict,
    config_digest,
    dilation_infer,
    load_calibration,
    max_set_size_sensitivity,
    rwcp_infer,
    standard_crc_infer,
)
from .diffusion import DiffusionConfig, diffuse_full
from .errors import (
    ConfigError,
    ConfwalkError,
    IoFailure,
    MalformedFile,
    ShapeMismatch,
    TargetInfeasible,
    Unsatisfiable,
)
from .graph import GraphConfig
from .synthetic import SceneSpec, coverage_simulation, gen_sharp_case
from .tensors import (
    BinaryMask,
    load_binary_mask,
    load_feature_map,
    load_manifest,
    load_prob_map,
    save_tensor,
)

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map domain errors onto the stable exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (TargetInfeasible, Unsatisfiable) as exc:
            _fail(EXIT_INFEASIBLE, str(exc))
        except (IoFailure, MalformedFile, ShapeMismatch) as exc:
            _fail(EXIT_IO, str(exc))
        except ConfwalkError as exc:
            _fail(EXIT_CONFIG, str(exc))

    return wrapper


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fp:
            data = tomllib.load(fp)
    except OSError as exc:
        raise IoFailure(f"failed to read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table of key/value pairs")
    return data


# Config keys any subcommand understands; one TOML file can drive a whole
# calibrate/infer/evaluate workflow, so extra known keys are not errors.
_CONFIG_KEYS = {
    "manifest", "method", "alpha", "k", "beta", "steps", "out", "calibration",
    "seed", "workers", "strict", "png", "pred", "scale", "connectivity",
    "n_cal", "n_test", "trials", "csv_path", "entry_id", "step",
}


def _merge(ctx: click.Context, config: dict, **flags) -> dict:
    """Defaults < config file < explicitly passed flags."""
    merged = dict(flags)
    for key, value in config.items():
        norm = key.replace("-", "_")
        if norm not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if norm not in merged:
            continue  # belongs to another subcommand
        src = ctx.get_parameter_source(norm)
        if src is not None and src.name != "DEFAULT":
            continue  # flag given explicitly, keep it
        merged[norm] = value
    return merged


def _diffusion_config(merged: dict) -> DiffusionConfig:
    return DiffusionConfig(
        n_step=int(merged["steps"]),
        graph=GraphConfig(k=int(merged["k"]), beta=float(merged["beta"])),
    )


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc


def _atomic_save_tensor(grid, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    save_tensor(grid, tmp)
    os.replace(tmp, path)


def _emit(payload: dict, as_json: bool, human_lines: list[str]) -> None:
    for line in human_lines:
        click.echo(line, err=True)
    if as_json:
        click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.version_option(package_name="confwalk")
def main():
    """Risk-controlled segmentation sets with feature-graph score diffusion."""


_common = [
    click.option("--config", type=click.Path(), default=None, help="TOML config file."),
    click.option("--json", "as_json", is_flag=True, help="Emit JSON on stdout."),
]


def _with(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn

    return deco


@main.command()
@click.option("--manifest", type=click.Path(), default=None, help="Dataset manifest JSON.")
@click.option("--method", type=click.Choice(METHODS), default=METHOD_RWCP, show_default=True)
@click.option("--alpha", type=float, default=0.1, show_default=True, help="Target risk level.")
@click.option("--k", type=int, default=20, show_default=True, help="Graph neighbors per pixel.")
@click.option("--beta", type=float, default=50.0, show_default=True, help="Kernel scale.")
@click.option("--steps", type=int, default=10, show_default=True, help="Diffusion steps.")
@click.option("--out", type=click.Path(), default="calibration.json", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@_with(_common)
@click.pass_context
@_guarded
def calibrate(ctx, manifest, method, alpha, k, beta, steps, out, workers, config, as_json):
    """Calibrate the risk-controlling threshold on a labeled manifest."""
    merged = _merge(
        ctx,
        _load_config_file(config),
        manifest=manifest,
        method=method,
        alpha=float(alpha),
        k=k,
        beta=beta,
        steps=steps,
        out=out,
        workers=int(workers),
    )
    if merged["manifest"] is None:
        raise ConfigError("calibrate requires --manifest (or a config value)")
    data = load_manifest(merged["manifest"])
    for entry in data:
        if entry.mask_path is None:
            raise ConfigError(f"manifest entry {entry.id!r} has no mask")

    method = merged["method"]
    alpha = float(merged["alpha"])
    if method == METHOD_RWCP:
        result = conformal.rwcp_calibrate(
            data, _diffusion_config(merged), alpha, workers=int(merged["workers"])
        )
    else:
        probs = [load_prob_map(e.prob_path) for e in data]
        masks = [load_binary_mask(e.mask_path) for e in data]
        if method == METHOD_CRC:
            result = conformal.standard_crc_calibrate(probs, masks, alpha)
        else:
            result = conformal.dilation_calibrate(probs, masks, alpha)

    out_path = Path(merged["out"])
    _atomic_write_text(
        out_path, json.dumps(calibration_to_dict(result), sort_keys=True) + "\n"
    )
    payload = calibration_to_dict(result)
    payload["out"] = str(out_path)
    del payload["curve"]
    _emit(
        payload,
        as_json,
        [
            f"method={result.method} n={result.n}",
            f"lambda_hat={result.lambda_hat:.6g} alpha={result.alpha} "
            f"alpha_star={result.alpha_star:.6g}",
            f"achieved calibration risk={result.achieved_risk:.6g}",
            f"wrote {out_path}",
        ],
    )


def _infer_one(entry, result: CalibrationResult, cfg: DiffusionConfig) -> BinaryMask:
    prob = load_prob_map(entry.prob_path)
    if result.method == METHOD_RWCP:
        feats = load_feature_map(entry.feature_path)
        return rwcp_infer(prob, feats, cfg, result.lambda_hat)
    if result.method == METHOD_CRC:
        return standard_crc_infer(prob, result.lambda_hat)
    return dilation_infer(prob, result.lambda_hat)


def _render_png(mask: BinaryMask, truth: BinaryMask | None, path: Path) -> None:
    try:
        from PIL import Image
    except ModuleNotFoundError as exc:
        raise ConfigError("--png requires the Pillow package") from exc
    h, w = mask.values.shape
    rgb = np.full((h, w, 3), 255, dtype=np.uint8)
    rgb[mask.values] = (220, 40, 40)
    if truth is not None:
        rgb[truth.values & ~mask.values] = (40, 60, 220)
        rgb[truth.values & mask.values] = (160, 40, 160)
    Image.fromarray(rgb).save(path)


def _expected_hash(result: CalibrationResult, cfg: DiffusionConfig) -> str:
    if result.method == METHOD_RWCP:
        return config_digest(METHOD_RWCP, cfg)
    if result.method == METHOD_CRC:
        return config_digest(METHOD_CRC)
    return config_digest(METHOD_DILATION, structuring="3x3-8conn")


@main.command()
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--calibration", type=click.Path(), default=None, help="Calibration JSON.")
@click.option("--out", type=click.Path(), default="predictions", show_default=True)
@click.option("--k", type=int, default=20, show_default=True)
@click.option("--beta", type=float, default=50.0, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--strict", is_flag=True, help="Fail on config-hash mismatch.")
@click.option("--png", is_flag=True, help="Also write overlay PNGs.")
@click.option("--workers", type=int, default=1, show_default=True)
@_with(_common)
@click.pass_context
@_guarded
def infer(ctx, manifest, calibration, out, k, beta, steps, strict, png, workers, config, as_json):
    """Write one prediction-set mask tensor per manifest entry."""
    merged = _merge(
        ctx,
        _load_config_file(config),
        manifest=manifest,
        calibration=calibration,
        out=out,
        k=k,
        beta=beta,
        steps=steps,
        strict=bool(strict),
        png=bool(png),
        workers=int(workers),
    )
    if merged["manifest"] is None or merged["calibration"] is None:
        raise ConfigError("infer requires --manifest and --calibration")
    data = load_manifest(merged["manifest"])
    result = load_calibration(merged["calibration"])
    cfg = _diffusion_config(merged)

    expected = _expected_hash(result, cfg)
    if expected != result.config_hash:
        click.echo(
            f"warning: config hash {expected} does not match calibration "
            f"{result.config_hash}; the risk guarantee does not transfer",
            err=True,
        )
        if merged["strict"]:
            sys.exit(EXIT_CONFIG)

    out_dir = Path(merged["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = int(merged["workers"])
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            masks = list(pool.map(lambda e: _infer_one(e, result, cfg), data))
    else:
        masks = [_infer_one(e, result, cfg) for e in data]
    written = {}
    for entry, mask in zip(data, masks):
        path = out_dir / f"{entry.id}.npy"
        _atomic_save_tensor(mask, path)
        written[entry.id] = str(path)
        if merged["png"]:
            truth = (
                load_binary_mask(entry.mask_path) if entry.mask_path else None
            )
            _render_png(mask, truth, out_dir / f"{entry.id}.png")
    _emit(
        {"lambda_hat": result.lambda_hat, "method": result.method, "masks": written},
        as_json,
        [f"wrote {len(written)} masks to {out_dir}"],
    )


@main.command()
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--pred", type=click.Path(), default=None, help="Directory of <id>.npy prediction masks.")
@click.option("--calibration", type=click.Path(), default=None, help="Recompute predictions from this calibration.")
@click.option("--k", type=int, default=20, show_default=True)
@click.option("--beta", type=float, default=50.0, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), default="metrics.csv", show_default=True)
@click.option("--scale", type=float, default=1.0, show_default=True, help="Pixel-to-physical distance factor.")
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="4", show_default=True)
@_with(_common)
@click.pass_context
@_guarded
def evaluate(ctx, manifest, pred, calibration, k, beta, steps, out, scale, connectivity, config, as_json):
    """Per-image metric CSV plus an aggregate summary."""
    merged = _merge(
        ctx,
        _load_config_file(config),
        manifest=manifest,
        pred=pred,
        calibration=calibration,
        k=k,
        beta=beta,
        steps=steps,
        out=out,
        scale=float(scale),
        connectivity=str(connectivity),
    )
    if merged["manifest"] is None:
        raise ConfigError("evaluate requires --manifest")
    if merged["pred"] is None and merged["calibration"] is None:
        raise ConfigError("evaluate needs --pred masks or --calibration to recompute")
    data = load_manifest(merged["manifest"])
    conn = int(merged["connectivity"])
    scale = float(merged["scale"])

    result = cfg = None
    if merged["pred"] is None:
        result = load_calibration(merged["calibration"])
        cfg = _diffusion_config(merged)

    rows = []
    reports = []
    for entry in data:
        if entry.mask_path is None:
            raise ConfigError(f"manifest entry {entry.id!r} has no mask")
        truth = load_binary_mask(entry.mask_path)
        if merged["pred"] is not None:
            pred_mask = load_binary_mask(Path(merged["pred"]) / f"{entry.id}.npy")
        else:
            pred_mask = _infer_one(entry, result, cfg)
        base = base_prediction(load_prob_map(entry.prob_path))
        report = metrics.evaluate_pair(
            pred_mask, truth, base, connectivity=conn, scale=scale
        )
        reports.append(report)
        rows.append(
            [
                entry.id,
                f"{report.coverage:.9g}",
                f"{report.stretch:.9g}",
                f"{report.dsc:.9g}",
                f"{report.assd:.9g}",
                f"{report.hd95:.9g}",
                ";".join(report.flags),
            ]
        )

    out_path = Path(merged["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=out_path.parent, prefix=f".{out_path.name}.")
        with os.fdopen(fd, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["id", "coverage", "stretch", "dsc", "assd", "hd95", "flags"])
            writer.writerows(rows)
        os.replace(tmp, out_path)
    except OSError as exc:
        raise IoFailure(f"failed to write {out_path}: {exc}") from exc

    summary = metrics.summarize(reports)
    human = [f"wrote {out_path} ({len(rows)} rows)"]
    for name in ("coverage", "stretch", "dsc", "assd", "hd95"):
        cell = summary[name]
        if cell["mean"] is not None:
            human.append(f"{name}: {cell['mean']:.4f} +/- {cell['std']:.4f}")
    if summary["n_degenerate"]:
        human.append(f"{summary['n_degenerate']} degenerate rows flagged")
    _emit(summary, as_json, human)


@main.command()
@click.option("--method", type=click.Choice(METHODS), default=METHOD_RWCP, show_default=True)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--n-cal", type=int, default=20, show_default=True)
@click.option("--n-test", type=int, default=200, show_default=True)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=20, show_default=True)
@click.option("--beta", type=float, default=50.0, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Write the JSON summary here.")
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="Write per-trial FNRs as CSV.")
@_with(_common)
@click.pass_context
@_guarded
def simulate(ctx, method, alpha, n_cal, n_test, trials, seed, k, beta, steps, out, csv_path, config, as_json):
    """Coverage simulation: repeated calibrate/test splits on synthetic scenes."""
    merged = _merge(
        ctx,
        _load_config_file(config),
        method=method,
        alpha=float(alpha),
        n_cal=int(n_cal),
        n_test=int(n_test),
        trials=int(trials),
        seed=int(seed),
        k=k,
        beta=beta,
        steps=steps,
        out=out,
        csv_path=csv_path,
    )
    spec = SceneSpec(seed=int(merged["seed"]))
    summary = coverage_simulation(
        spec,
        merged["method"],
        float(merged["alpha"]),
        int(merged["n_cal"]),
        int(merged["n_test"]),
        int(merged["trials"]),
        cfg=_diffusion_config(merged),
    )
    if merged["out"] is not None:
        _atomic_write_text(
            Path(merged["out"]), json.dumps(summary, sort_keys=True) + "\n"
        )
    if merged["csv_path"] is not None:
        lines = ["trial,fnr"] + [
            f"{i},{v:.9g}" for i, v in enumerate(summary["per_trial_fnr"])
        ]
        _atomic_write_text(Path(merged["csv_path"]), "\n".join(lines) + "\n")
    _emit(
        summary,
        as_json,
        [
            f"method={summary['method']} alpha={summary['alpha']} "
            f"trials={summary['trials']}",
            f"grand mean FNR={summary['grand_mean_fnr']:.5f} "
            f"(target {summary['alpha']}, lower-bound diagnostic "
            f"{summary['risk_lower_bound']:.5f})",
        ],
    )


@main.command()
@click.option("--manifest", type=click.Path(), default=None, help="Run on a manifest entry instead of a synthetic scene.")
@click.option("--id", "entry_id", type=str, default=None, help="Manifest entry id.")
@click.option("--seed", type=int, default=0, show_default=True, help="Synthetic sharp-scene seed.")
@click.option("--step", type=float, default=0.005, show_default=True, help="Lambda grid step.")
@click.option("--k", type=int, default=20, show_default=True)
@click.option("--beta", type=float, default=50.0, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@_with(_common)
@click.pass_context
@_guarded
def stability(ctx, manifest, entry_id, seed, step, k, beta, steps, config, as_json):
    """Set-size sensitivity of raw vs diffused scores on a lambda grid."""
    merged = _merge(
        ctx,
        _load_config_file(config),
        manifest=manifest,
        entry_id=entry_id,
        seed=int(seed),
        step=float(step),
        k=k,
        beta=beta,
        steps=steps,
    )
    cfg = _diffusion_config(merged)
    if merged["manifest"] is not None:
        data = load_manifest(merged["manifest"])
        wanted = merged["entry_id"]
        entry = next((e for e in data if wanted in (None, e.id)), None)
        if entry is None:
            raise ConfigError(f"manifest has no entry with id {wanted!r}")
        prob = load_prob_map(entry.prob_path)
        feats = load_feature_map(entry.feature_path)
        source = entry.id
    else:
        prob, feats, _ = gen_sharp_case(SceneSpec(seed=int(merged["seed"])))
        source = f"sharp-seed-{merged['seed']}"

    diffused = diffuse_full(prob, feats, cfg)
    raw_sens = max_set_size_sensitivity(prob, float(merged["step"]))
    diff_sens = max_set_size_sensitivity(diffused, float(merged["step"]))
    payload = {
        "source": source,
        "step": float(merged["step"]),
        "raw_sensitivity": raw_sens,
        "diffused_sensitivity": diff_sens,
        "reduction_factor": raw_sens / diff_sens if diff_sens > 0 else float("inf"),
    }
    _emit(
        payload,
        as_json,
        [
            f"{source}: raw sensitivity {raw_sens:.1f}, "
            f"diffused {diff_sens:.1f}, "
            f"reduction {payload['reduction_factor']:.2f}x",
        ],
    )


if __name__ == "__main__":
    main()
