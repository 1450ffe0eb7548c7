"""Command-line front end for the feature-map extractor."""

import argparse
import sys
from pathlib import Path

from .errors import ExtractorError
from .extract import MEAN_RGB, ExtractionConfig, batch_extract, crop_query, extract


def _config(args) -> ExtractionConfig:
    return ExtractionConfig(
        model=args.model,
        layer=args.layer,
        min_short_side=args.min_short,
        max_area=args.max_area,
        mean=tuple(args.mean),
        workers=getattr(args, "workers", 1),
    )


def _add_config_flags(p):
    p.add_argument("--model", default="vgg19", help="registered trunk name")
    p.add_argument("--layer", default=None, help="layer name (default: the model's last conv)")
    p.add_argument("--min-short", type=int, default=256, help="minimum short side in pixels")
    p.add_argument("--max-area", type=int, default=1_000_000, help="maximum pixel area")
    p.add_argument(
        "--mean", type=float, nargs=3, default=list(MEAN_RGB), metavar=("R", "G", "B"),
        help="RGB mean pixel to subtract",
    )


def cmd_extract(args) -> int:
    cfg = _config(args)
    records = batch_extract(args.images, args.out, cfg)
    for r in records:
        print(f"{r.image_id}\t{r.grid_height}x{r.grid_width}x{r.channels}\tscale\t{r.scale:.6g}")
    print(Path(args.out) / "manifest.json")
    return 0


def cmd_crop_query(args) -> int:
    cfg = _config(args)
    try:
        box = tuple(int(v) for v in args.box.split(","))
    except ValueError:
        box = ()
    if len(box) != 4:
        raise ExtractorError(f"--box wants top,left,height,width, got '{args.box}'")
    r = crop_query(args.image, box, args.out, cfg)
    print(f"{r.image_id}\t{r.grid_height}x{r.grid_width}x{r.channels}\tscale\t{r.scale:.6g}")
    return 0


def cmd_extract_one(args) -> int:
    cfg = _config(args)
    r = extract(args.image, args.out, cfg)
    print(f"{r.image_id}\t{r.grid_height}x{r.grid_width}x{r.channels}\tscale\t{r.scale:.6g}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cfmextract",
        description="Run a pretrained CNN trunk on images and emit feature-map tensor files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="batch-extract images into a corpus directory")
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output corpus directory")
    _add_config_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("extract-one", help="extract a single image to a tensor file")
    p.add_argument("image", type=Path)
    p.add_argument("out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_extract_one)

    p = sub.add_parser("crop-query", help="crop a pixel box, then extract it")
    p.add_argument("image", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--box", required=True, help="top,left,height,width in pixels")
    _add_config_flags(p)
    p.set_defaults(func=cmd_crop_query)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExtractorError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
