"""Image -> feature-map tensor files, plus the corpus manifest.

The output format is the retrieval engine's binary tensor file: magic
``CFM1``, three little-endian u32 dims H, W, D, then H*W*D float32
values row-major. This module owns its writer; there is no code
dependency on the retrieval side, only the shared file formats.

Resize policy: images are kept at their original size, except that a
short side under ``min_short_side`` is scaled up to exactly that value
and a pixel area over ``max_area`` is scaled down under it; when both
rules cannot hold at once the area cap wins. Aspect ratio is preserved
to within one pixel. Inputs are zero-centered by RGB mean-pixel
subtraction after the resize, and the trunk's post-ReLU activations are
written out.
"""

import json
import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ImageError
from .models import layer_spec, output_grid, stride_product

CFM_MAGIC = b"CFM1"
_HEADER = struct.Struct("<4sIII")

# Caffe-era RGB mean pixel, the standard zero-centering for VGG trunks.
MEAN_RGB = (123.68, 116.779, 103.939)


@dataclass(frozen=True)
class ExtractionConfig:
    model: str = "vgg19"
    layer: str | None = None
    min_short_side: int = 256
    max_area: int = 1_000_000
    mean: tuple = MEAN_RGB
    workers: int = 1

    def __post_init__(self):
        layer_spec(self.model, self.layer)  # raises ConfigError if unknown
        if len(self.mean) != 3:
            raise ConfigError(f"mean must have 3 components, got {len(self.mean)}")
        if self.min_short_side < 1:
            raise ConfigError("min_short_side must be >= 1")
        if self.max_area < 1:
            raise ConfigError("max_area must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class ExtractionRecord:
    image_id: str
    tensor_path: str
    grid_height: int
    grid_width: int
    channels: int
    scale: float          # resize factor applied to the input pixels
    pixel_to_grid: float  # multiply an input-pixel coordinate by this to get a grid cell


# -- resize policy -----------------------------------------------------------

def _plan(height: int, width: int, cfg: ExtractionConfig) -> tuple[float, bool]:
    scale = 1.0
    short = min(height, width)
    if short < cfg.min_short_side:
        scale = cfg.min_short_side / short
    if height * width * scale * scale > cfg.max_area:
        return math.sqrt(cfg.max_area / (height * width)), True
    return scale, False


def resize_factor(height: int, width: int, cfg: ExtractionConfig) -> float:
    return _plan(height, width, cfg)[0]


def resized_shape(height: int, width: int, cfg: ExtractionConfig) -> tuple[int, int]:
    scale, capped = _plan(height, width, cfg)
    if scale == 1.0:
        return height, width
    # When the area cap set the scale, floor so the cap holds strictly
    # (the cap can still enlarge a tiny image, so the sign of scale does
    # not identify the branch). Otherwise the short side lands on
    # min_short_side exactly and rounding keeps the area in bounds.
    rnd = math.floor if capped else round
    return max(1, rnd(height * scale)), max(1, rnd(width * scale))


# -- trunk cache -------------------------------------------------------------

_TRUNKS: dict = {}
_TRUNK_LOCK = threading.Lock()


def _trunk(cfg: ExtractionConfig):
    name, spec = layer_spec(cfg.model, cfg.layer)
    key = (cfg.model, name)
    with _TRUNK_LOCK:
        if key not in _TRUNKS:
            _TRUNKS[key] = (spec.build(), spec)
        return _TRUNKS[key]


# -- core --------------------------------------------------------------------

def load_rgb(path) -> np.ndarray:
    """Decode an image file to uint8 H x W x 3."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise ImageError(f"cannot read image '{path}': {e}") from e


def extract_array(pixels: np.ndarray, cfg: ExtractionConfig) -> tuple[np.ndarray, float]:
    """Run the trunk on raw pixels; returns (H x W x D float32, resize scale)."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageError(f"expected H x W x 3 pixels, got shape {pixels.shape}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise ImageError("empty image")
    trunk, spec = _trunk(cfg)
    height, width = pixels.shape[:2]
    scale = resize_factor(height, width, cfg)
    target = resized_shape(height, width, cfg)
    # astype copies, so decoders that return read-only arrays are fine here
    x = torch.from_numpy(pixels.astype(np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    if target != (height, width):
        x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
    x = x - torch.tensor(cfg.mean, dtype=torch.float32).view(1, 3, 1, 1)
    with torch.inference_mode():
        out = trunk(x)[0].clamp_min(0.0)  # post-ReLU activations, enforced
    arr = out.permute(1, 2, 0).contiguous().numpy().astype(np.float32)
    if arr.shape != (*output_grid(spec.ops, *target), spec.channels):
        raise ConfigError(
            f"trunk output {arr.shape} disagrees with its registered trace"
        )
    return arr, scale


def write_cfm(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 3 or values.size == 0:
        raise ImageError(f"tensor must be non-empty H x W x D, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ImageError("tensor has non-finite values")
    if (values < 0).any():
        raise ImageError("tensor has negative values")
    h, w, d = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CFM_MAGIC, h, w, d))
        f.write(values.tobytes())


def _record(image_id, out_path, arr, scale, cfg) -> ExtractionRecord:
    _, spec = layer_spec(cfg.model, cfg.layer)
    return ExtractionRecord(
        image_id=image_id,
        tensor_path=str(out_path),
        grid_height=arr.shape[0],
        grid_width=arr.shape[1],
        channels=arr.shape[2],
        scale=scale,
        pixel_to_grid=scale / stride_product(spec.ops),
    )


def extract(image_path, out_path, cfg: ExtractionConfig) -> ExtractionRecord:
    """Extract one image to a tensor file."""
    pixels = load_rgb(image_path)
    arr, scale = extract_array(pixels, cfg)
    write_cfm(out_path, arr)
    return _record(Path(image_path).stem, out_path, arr, scale, cfg)


def crop_query(image_path, box, out_path, cfg: ExtractionConfig) -> ExtractionRecord:
    """Crop a pixel box (top, left, height, width) first, then extract.

    The crop happens at original resolution, so a tiny box is scaled up
    by the short-side rule like any small image.
    """
    pixels = load_rgb(image_path)
    top, left, height, width = (int(v) for v in box)
    if height < 1 or width < 1:
        raise ImageError(f"degenerate crop box {box}")
    if top < 0 or left < 0 or top + height > pixels.shape[0] or left + width > pixels.shape[1]:
        raise ImageError(
            f"crop box {box} outside image {pixels.shape[0]}x{pixels.shape[1]}"
        )
    arr, scale = extract_array(pixels[top : top + height, left : left + width], cfg)
    write_cfm(out_path, arr)
    return _record(Path(image_path).stem, out_path, arr, scale, cfg)


# -- batch driver and manifest -----------------------------------------------

def write_manifest(path, records, queries=()) -> None:
    """Corpus manifest in the retrieval engine's JSON schema.

    Tensor paths are written relative to the manifest's directory.
    """
    base = Path(path).parent
    doc = {
        "entries": [
            {"id": r.image_id, "path": str(Path(r.tensor_path).relative_to(base))}
            for r in records
        ],
        "queries": [
            {"id": r.image_id, "path": str(Path(r.tensor_path).relative_to(base))}
            for r in queries
        ],
        "relevance": {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report(path, records) -> None:
    doc = {
        r.image_id: {
            "grid": [r.grid_height, r.grid_width, r.channels],
            "scale": r.scale,
            "pixel_to_grid": r.pixel_to_grid,
        }
        for r in records
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def batch_extract(image_paths, out_dir, cfg: ExtractionConfig) -> list:
    """Extract every image to ``out_dir/<stem>.cfm``; returns the records.

    Runs a thread pool of ``cfg.workers``; one output file per image and
    no shared mutable state beyond the read-only trunk, so worker count
    does not affect the bytes produced.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in image_paths]
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise ImageError("duplicate image stems; ids would collide")
    _trunk(cfg)  # build once up front, not once per worker
    if cfg.workers == 1:
        records = [extract(p, out_dir / f"{p.stem}.cfm", cfg) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [
                pool.submit(extract, p, out_dir / f"{p.stem}.cfm", cfg) for p in paths
            ]
            records = [f.result() for f in futures]
    write_manifest(out_dir / "manifest.json", records)
    write_report(out_dir / "extraction_report.json", records)
    return records
