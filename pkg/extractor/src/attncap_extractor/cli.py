"""CLI: extract feature files from images with a frozen backbone."""

from __future__ import annotations

import argparse
import sys

from .extractor import (
    BackboneUnavailable,
    ExtractorConfig,
    UnexpectedFeatureShape,
    UnreadableImage,
    extract,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="attncap-extract", description=__doc__)
    parser.add_argument("images", nargs="+", help="RGB image paths")
    parser.add_argument("--backbone", choices=["resnet50", "mobilenet_v2"], default="mobilenet_v2")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument(
        "--no-pretrained",
        action="store_true",
        help="load the architecture without pretrained weights (format/geometry runs only)",
    )
    args = parser.parse_args(argv)
    config = ExtractorConfig(
        backbone=args.backbone,
        out_dir=args.out,
        batch_size=args.batch_size,
        pretrained=not args.no_pretrained,
    )
    try:
        entries = extract(args.images, config)
    except (BackboneUnavailable, UnreadableImage, UnexpectedFeatureShape, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(entries)} feature files to {config.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
