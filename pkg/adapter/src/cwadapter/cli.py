"""Command line front end for the export adapter."""

from __future__ import annotations

import json
import sys

import click

from .encoders import available_encoders
from .errors import AdapterError, BadSpec, EncoderUnavailable, ExportFailure
from .extract import PROBABILITY_MODELS, ExtractionSpec, extract_features
from .preprocess import Preprocess

EXIT_CONFIG = 2
EXIT_IO = 4


@click.group()
@click.version_option(package_name="cwadapter")
def main():
    """Export patch features and probability maps into the toolkit formats."""


@main.command()
@click.option("--images", required=True, type=click.Path(), help="Input image directory.")
@click.option("--encoder", default="local-descriptors", show_default=True,
              help="Registered encoder id.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--layer", default=None, help="Encoder layer; defaults to the final layer.")
@click.option("--patch-size", default=16, show_default=True, help="Patch edge in pixels.")
@click.option("--clip-lo", default=0.5, show_default=True, help="Lower clip percentile.")
@click.option("--clip-hi", default=99.5, show_default=True, help="Upper clip percentile.")
@click.option("--resize", nargs=2, type=int, default=None,
              help="Resize to HEIGHT WIDTH before encoding.")
@click.option("--probs-model", default="intensity", show_default=True,
              type=click.Choice(sorted(PROBABILITY_MODELS)),
              help="Probability-map producer standing in for a trained model.")
@click.option("--masks", default=None, type=click.Path(),
              help="Directory of <id>.npy masks to reference from the manifest.")
@click.option("--json", "as_json", is_flag=True, help="Emit a JSON summary on stdout.")
def extract(images, encoder, out, layer, patch_size, clip_lo, clip_hi, resize,
            probs_model, masks, as_json):
    """Encode every image in a directory and write tensors plus manifest."""
    try:
        spec = ExtractionSpec(
            images_dir=images,
            out_dir=out,
            encoder=encoder,
            layer=layer,
            patch_size=int(patch_size),
            preprocess=Preprocess(
                clip_lo=float(clip_lo),
                clip_hi=float(clip_hi),
                resize=tuple(resize) if resize else None,
            ),
            probability_model=probs_model,
            masks_dir=masks,
        )
        summary = extract_features(spec)
    except ExportFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except (BadSpec, EncoderUnavailable, AdapterError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    click.echo(
        f"encoded {len(summary['ids'])} images with {summary['encoder']}"
        f"[{summary['layer']}], skipped {len(summary['skipped'])}; "
        f"manifest at {summary['manifest']}",
        err=True,
    )
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))


@main.command(name="encoders")
def list_encoders():
    """List registered encoder ids."""
    for name in available_encoders():
        click.echo(name)


if __name__ == "__main__":
    main()
