"""Global descriptors: sum pooling, regional max aggregation, PCA whitening.

All descriptor math runs in float64.  Whitening models are quantized to
float32 values (held in float64 arrays) so that a model written to disk and
read back is numerically identical to the freshly fitted one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .cfm_store import CfmTensor
from .errors import ConfigurationError, FormatError, InsufficientDataError, ValidationError

# Relative eigenvalue floor: components this far below the leading eigenvalue
# get a zero inverse-sqrt scale instead of a huge one.
EIGENVALUE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    """Unit-norm image descriptor, or the flagged all-zero degenerate one."""

    vector: np.ndarray
    zero: bool = False

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def unit_normalized(v: np.ndarray) -> GlobalDescriptor:
    """l2-normalize ``v``; an all-zero input yields the flagged zero descriptor."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return GlobalDescriptor(v.copy(), zero=True)
    return GlobalDescriptor(v / n)


@dataclass(frozen=True, eq=False)
class WhiteningModel:
    """Mean vector plus a Dout x D projection (eigenvector rows scaled by
    inverse-sqrt eigenvalues, sorted by descending eigenvalue)."""

    mean: np.ndarray
    projection: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[0]


def identity_whitening(dim: int) -> WhiteningModel:
    """A no-op model: zero mean, identity projection."""
    return WhiteningModel(np.zeros(dim), np.eye(dim))


def _quantize(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def fit_whitening(samples, out_dim: int) -> WhiteningModel:
    """Fit a PCA-whitening model on hold-out descriptor samples.

    Covariance uses the n-1 normalization.  Eigenvalues below
    ``EIGENVALUE_FLOOR`` relative to the largest keep their eigenvector row
    but get a zero scale, so rank-deficient sample sets cannot blow up the
    projection.  Eigenvector signs are canonicalized (largest-magnitude
    component positive) to keep fits reproducible.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"samples must be a 2-D (n, D) array, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit whitening, got {n}")
    if not (1 <= out_dim <= d):
        raise ValidationError(f"out_dim {out_dim} not in [1, {d}]")
    if out_dim > n:
        raise ValidationError(f"out_dim {out_dim} exceeds sample count {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order].T  # rows are eigenvectors
    for row in eigvecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    floor = EIGENVALUE_FLOOR * max(float(eigvals[0]), 0.0)
    scales = np.where(eigvals > floor, 1.0 / np.sqrt(np.maximum(eigvals, np.finfo(float).tiny)), 0.0)
    return WhiteningModel(_quantize(mean), _quantize(scales[:, None] * eigvecs))


def clamped_dimensions(m: WhiteningModel) -> int:
    """Number of projection rows whose scale was floored to zero."""
    return int(np.sum(~np.any(m.projection != 0.0, axis=1)))


def whiten_raw(m: WhiteningModel, v: np.ndarray) -> np.ndarray:
    """projection @ (v - mean), without the final l2 step."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m.input_dim,):
        raise ValidationError(f"vector has dim {v.shape}, model expects ({m.input_dim},)")
    return m.projection @ (v - m.mean)


def apply_whitening(m: WhiteningModel, v: np.ndarray) -> GlobalDescriptor:
    """Whiten then l2-normalize; degenerate results come back flagged zero."""
    return unit_normalized(whiten_raw(m, v))


class AggregationMethod(str, Enum):
    SPOC = "spoc"
    RMAC = "rmac"


@dataclass(frozen=True)
class AggregationConfig:
    method: AggregationMethod = AggregationMethod.SPOC
    scales: int = 3  # region pyramid levels, regional-max aggregation only
    whitening: WhiteningModel | None = None

    def __post_init__(self):
        if self.scales < 1:
            raise ValidationError(f"scales must be >= 1, got {self.scales}")


def spoc(t: CfmTensor) -> GlobalDescriptor:
    """Sum all local descriptors and l2-normalize."""
    return unit_normalized(t.values.sum(axis=(0, 1), dtype=np.float64))


def rmac(t: CfmTensor, cfg: AggregationConfig) -> GlobalDescriptor:
    """Regional-max aggregation over the multi-scale square-region grid.

    Per region: channel-wise max, l2-normalize, whiten, l2-normalize.  The
    region vectors are summed and the sum l2-normalized.  All-zero regions
    contribute nothing.
    """
    from .base_regions import OsppConfig, sample_grid

    if cfg.whitening is None:
        raise ConfigurationError("regional-max aggregation requires a whitening model")
    wm = cfg.whitening
    if wm.input_dim != t.channels:
        raise ValidationError(
            f"whitening model expects dim {wm.input_dim}, tensor has {t.channels} channels"
        )
    total = np.zeros(wm.output_dim)
    for r in sample_grid(t.height, t.width, OsppConfig(scales=cfg.scales)):
        m = t.values[r.top : r.top + r.height, r.left : r.left + r.width, :].max(axis=(0, 1)).astype(np.float64)
        if not m.any():
            continue
        g = apply_whitening(wm, m / np.linalg.norm(m))
        if not g.zero:
            total += g.vector
    return unit_normalized(total)


def aggregate_global(t: CfmTensor, cfg: AggregationConfig) -> GlobalDescriptor:
    """Whole-image descriptor per ``cfg`` (whitening applied for both methods)."""
    if cfg.method is AggregationMethod.RMAC:
        return rmac(t, cfg)
    g = spoc(t)
    if cfg.whitening is None:
        return g
    if g.zero:
        return GlobalDescriptor(np.zeros(cfg.whitening.output_dim), zero=True)
    return apply_whitening(cfg.whitening, g.vector)


WHITENING_MAGIC = b"WHT1"
DESCRIPTOR_MAGIC = b"DSC1"


def save_whitening(m: WhiteningModel, path) -> None:
    """WHT1 binary: magic, u32 input/output dims, mean then projection as f32."""
    with open(Path(path), "wb") as fh:
        fh.write(WHITENING_MAGIC)
        fh.write(struct.pack("<II", m.input_dim, m.output_dim))
        fh.write(np.ascontiguousarray(m.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(m.projection, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"file truncated while reading {what}")
    return data


def load_whitening(path) -> WhiteningModel:
    with open(Path(path), "rb") as fh:
        if _read_exact(fh, 4, "magic") != WHITENING_MAGIC:
            raise FormatError(f"{path}: not a whitening model file (bad magic)")
        din, dout = struct.unpack("<II", _read_exact(fh, 8, "header"))
        mean = np.frombuffer(_read_exact(fh, 4 * din, "mean"), dtype="<f4").astype(np.float64)
        proj = np.frombuffer(
            _read_exact(fh, 4 * dout * din, "projection"), dtype="<f4"
        ).astype(np.float64)
    return WhiteningModel(mean, proj.reshape(dout, din))


def save_descriptors(rows: np.ndarray, path) -> None:
    """DSC1 binary: magic, u32 count and dim, then f32 rows; the fit input format."""
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValidationError(f"descriptor matrix must be N x D, got shape {a.shape}")
    with open(Path(path), "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_descriptors(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        if _read_exact(fh, 4, "magic") != DESCRIPTOR_MAGIC:
            raise FormatError(f"{path}: not a descriptor file (bad magic)")
        n, d = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if n < 1 or d < 1:
            raise FormatError(f"{path}: empty descriptor matrix")
        raw = _read_exact(fh, 4 * n * d, "rows")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, d)
