"""Extraction mechanics on the seeded tiny trunk (no weight downloads)."""

import json
import struct

import numpy as np
import pytest
from PIL import Image

from cfmextract import (
    CFM_MAGIC,
    ConfigError,
    ExtractionConfig,
    ImageError,
    batch_extract,
    crop_query,
    extract,
    extract_array,
    layer_spec,
    output_grid,
    resized_shape,
    stride_product,
    write_cfm,
)

CFG = ExtractionConfig(model="tiny")


def make_image(path, height, width, seed):
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    base = np.asarray(
        Image.fromarray(coarse).resize((width, height), Image.BILINEAR), dtype=np.float64
    )
    noise = rng.integers(0, 256, (height, width, 3))
    pixels = np.clip(0.7 * base + 0.3 * noise, 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return pixels


def read_cfm_raw(path):
    blob = path.read_bytes()
    magic, h, w, d = struct.unpack_from("<4sIII", blob)
    payload = np.frombuffer(blob, dtype="<f4", offset=16)
    return magic, (h, w, d), payload


def test_output_shape_matches_trace(tmp_path):
    img = tmp_path / "a.png"
    make_image(img, 64, 96, seed=0)
    rec = extract(img, tmp_path / "a.cfm", CFG)
    name, spec = layer_spec("tiny", None)
    assert name == "relu3"
    expected = output_grid(spec.ops, *resized_shape(64, 96, CFG))
    assert (rec.grid_height, rec.grid_width, rec.channels) == (*expected, 16)
    assert (rec.grid_height, rec.grid_width) == (64, 96)
    assert rec.scale == 4.0
    assert rec.pixel_to_grid == pytest.approx(4.0 / stride_product(spec.ops))


def test_same_image_twice_byte_identical(tmp_path):
    img = tmp_path / "a.png"
    make_image(img, 50, 70, seed=1)
    extract(img, tmp_path / "one.cfm", CFG)
    extract(img, tmp_path / "two.cfm", CFG)
    assert (tmp_path / "one.cfm").read_bytes() == (tmp_path / "two.cfm").read_bytes()


def test_file_layout_and_validity(tmp_path):
    img = tmp_path / "a.png"
    make_image(img, 40, 40, seed=2)
    rec = extract(img, tmp_path / "a.cfm", CFG)
    magic, dims, payload = read_cfm_raw(tmp_path / "a.cfm")
    assert magic == CFM_MAGIC
    assert dims == (rec.grid_height, rec.grid_width, rec.channels)
    assert payload.size == dims[0] * dims[1] * dims[2]
    assert np.isfinite(payload).all()
    assert (payload >= 0).all()


def test_full_box_crop_equals_extract(tmp_path):
    img = tmp_path / "a.png"
    pixels = make_image(img, 60, 80, seed=3)
    extract(img, tmp_path / "full.cfm", CFG)
    crop_query(img, (0, 0, pixels.shape[0], pixels.shape[1]), tmp_path / "crop.cfm", CFG)
    assert (tmp_path / "full.cfm").read_bytes() == (tmp_path / "crop.cfm").read_bytes()


def test_tiny_box_upscaled_by_short_side_rule(tmp_path):
    img = tmp_path / "a.png"
    make_image(img, 60, 80, seed=4)
    rec = crop_query(img, (10, 10, 2, 2), tmp_path / "crop.cfm", CFG)
    assert rec.scale == 128.0
    assert (rec.grid_height, rec.grid_width) == (64, 64)


def test_crop_box_validation(tmp_path):
    img = tmp_path / "a.png"
    make_image(img, 30, 30, seed=5)
    for box in [(0, 0, 31, 10), (0, 25, 10, 10), (-1, 0, 5, 5), (0, 0, 0, 5)]:
        with pytest.raises(ImageError):
            crop_query(img, box, tmp_path / "bad.cfm", CFG)


def test_solid_black_only_shape_asserted(tmp_path):
    img = tmp_path / "black.png"
    Image.fromarray(np.zeros((300, 400, 3), dtype=np.uint8)).save(img)
    rec = extract(img, tmp_path / "black.cfm", CFG)
    assert (rec.grid_height, rec.grid_width, rec.channels) == (75, 100, 16)
    assert rec.scale == 1.0
    assert rec.pixel_to_grid == 0.25


def test_post_relu_nonnegative(tmp_path):
    rng = np.random.default_rng(6)
    pixels = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
    arr, _ = extract_array(pixels, CFG)
    assert float(arr.min()) >= 0.0
    assert float((arr > 0).mean()) > 0.1  # the trunk is not dead


def test_relu2_layer(tmp_path):
    cfg = ExtractionConfig(model="tiny", layer="relu2")
    rng = np.random.default_rng(7)
    arr, scale = extract_array(rng.integers(0, 256, (64, 96, 3), dtype=np.uint8), cfg)
    assert scale == 4.0
    assert arr.shape == (128, 192, 12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExtractionConfig(model="nonexistent")
    with pytest.raises(ConfigError):
        ExtractionConfig(model="tiny", layer="relu9")
    with pytest.raises(ConfigError):
        ExtractionConfig(model="tiny", mean=(1.0, 2.0))
    with pytest.raises(ConfigError):
        ExtractionConfig(model="tiny", workers=0)
    with pytest.raises(ConfigError):
        ExtractionConfig(model="tiny", min_short_side=0)
    with pytest.raises(ConfigError):
        ExtractionConfig(model="tiny", max_area=0)


def test_write_cfm_rejects_bad_tensors(tmp_path):
    with pytest.raises(ImageError):
        write_cfm(tmp_path / "x.cfm", np.ones((2, 2), dtype=np.float32))
    neg = np.ones((2, 2, 2), dtype=np.float32)
    neg[0, 0, 0] = -1.0
    with pytest.raises(ImageError):
        write_cfm(tmp_path / "x.cfm", neg)
    nan = np.ones((2, 2, 2), dtype=np.float32)
    nan[1, 1, 1] = np.nan
    with pytest.raises(ImageError):
        write_cfm(tmp_path / "x.cfm", nan)


def test_unreadable_image(tmp_path):
    bogus = tmp_path / "not_an_image.png"
    bogus.write_text("plain text")
    with pytest.raises(ImageError):
        extract(bogus, tmp_path / "out.cfm", CFG)
    with pytest.raises(ImageError):
        extract(tmp_path / "missing.png", tmp_path / "out.cfm", CFG)


def test_batch_writes_manifest_and_report(tmp_path):
    images = []
    for i, (h, w) in enumerate([(40, 60), (55, 45), (64, 64)]):
        p = tmp_path / f"img{i}.png"
        make_image(p, h, w, seed=10 + i)
        images.append(p)
    out = tmp_path / "corpus"
    records = batch_extract(images, out, CFG)
    assert [r.image_id for r in records] == ["img0", "img1", "img2"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert [e["id"] for e in manifest["entries"]] == ["img0", "img1", "img2"]
    assert manifest["queries"] == []
    assert manifest["relevance"] == {}
    for e in manifest["entries"]:
        assert (out / e["path"]).is_file()
    report = json.loads((out / "extraction_report.json").read_text())
    for r in records:
        assert report[r.image_id]["grid"] == [r.grid_height, r.grid_width, r.channels]
        assert report[r.image_id]["scale"] == r.scale
        assert report[r.image_id]["pixel_to_grid"] == r.pixel_to_grid


def test_worker_count_does_not_change_bytes(tmp_path):
    images = []
    for i in range(4):
        p = tmp_path / f"img{i}.png"
        make_image(p, 40 + i, 50, seed=20 + i)
        images.append(p)
    one = tmp_path / "one"
    two = tmp_path / "two"
    batch_extract(images, one, ExtractionConfig(model="tiny", workers=1))
    batch_extract(images, two, ExtractionConfig(model="tiny", workers=3))
    for name in sorted(p.name for p in one.iterdir()):
        assert (one / name).read_bytes() == (two / name).read_bytes()


def test_duplicate_stems_rejected(tmp_path):
    a = tmp_path / "a" / "img.png"
    b = tmp_path / "b" / "img.png"
    a.parent.mkdir()
    b.parent.mkdir()
    make_image(a, 32, 32, seed=30)
    make_image(b, 32, 32, seed=31)
    with pytest.raises(ImageError):
        batch_extract([a, b], tmp_path / "corpus", CFG)
