"""Base-region descriptor sets for query-adaptive matching.

Two generators are provided.  Feature-map pooling (FMP) turns each channel's
positive-activation mask into a region, pools the local descriptors inside
it, and merges similar regions by clustering their pooled descriptors.
Overlapped spatial-pyramid pooling (OSPP) samples square windows at several
scales with roughly 40% overlap and max-pools each window.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .aggregate import WhiteningModel, apply_whitening, unit_normalized
from .cfm_store import CfmTensor
from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Boolean H x W membership mask; retained regions are never empty."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2 or not m.any():
            raise ValidationError("region mask must be a nonempty 2-D boolean grid")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def size(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class RectRegion:
    """Square window in grid coordinates."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height != self.width:
            raise ValidationError(f"sampled regions are square, got {self.height}x{self.width}")
        if self.height < 1 or self.top < 0 or self.left < 0:
            raise ValidationError(f"bad region {self}")


class Provenance(str, Enum):
    FMP = "fmp"
    OSPP = "ospp"


@dataclass(frozen=True, eq=False)
class BaseRegionSet:
    """K x D matrix of unit-norm region descriptors, one row per base region."""

    descriptors: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        f = np.asarray(self.descriptors, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValidationError(f"descriptor matrix must be K x D with K >= 1, got {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("descriptor matrix contains non-finite values")
        norms = np.linalg.norm(f, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            k = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(f"row {k} has norm {norms[k]}, expected 1")
        f.flags.writeable = False
        object.__setattr__(self, "descriptors", f)

    @property
    def count(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class FmpConfig:
    clusters: int = 25
    max_iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ValidationError(f"clusters must be >= 1, got {self.clusters}")
        if self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class OsppConfig:
    scales: int = 3
    overlap: float = 0.4

    def __post_init__(self):
        if self.scales < 1:
            raise ValidationError(f"scales must be >= 1, got {self.scales}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValidationError(f"overlap must be in [0, 1), got {self.overlap}")


class RawRegion(NamedTuple):
    channel: int
    mask: RegionMask
    descriptor: np.ndarray  # unit-norm, float64


def fmp_raw(t: CfmTensor) -> list[RawRegion]:
    """One region per channel with any strictly positive activation.

    The region is the channel's positive-support mask; its descriptor is the
    l2-normalized sum of the full local descriptors at those locations.
    Channels that are zero everywhere are dropped; a tensor with no positive
    value at all yields an empty list.
    """
    x = t.values.astype(np.float64)
    flat = x.reshape(-1, t.channels)
    out = []
    for d in range(t.channels):
        mask = x[:, :, d] > 0
        if not mask.any():
            continue
        vec = flat[mask.reshape(-1)].sum(axis=0)
        out.append(RawRegion(d, RegionMask(mask), unit_normalized(vec).vector))
    return out


def _kmeans(points: np.ndarray, k: int, max_iterations: int, seed: int):
    """Seeded k-means with k-means++ initialization; fully deterministic.

    Draw discipline (mirrored by the test oracle): the first center is
    ``rng.integers(n)``; each further center inverts one ``rng.random()``
    through the cumulative squared-distance distribution.  Initialization
    stops early if every remaining point coincides with a chosen center.
    Lloyd sweeps assign each point to the nearest center (ties to the lowest
    center index), stop when the assignment repeats, and keep a centroid
    unchanged when its cluster goes empty.
    """
    rng = np.random.default_rng(seed)
    n = points.shape[0]
    k = min(k, n)
    centers = [points[int(rng.integers(n))]]
    while len(centers) < k:
        d2 = ((points[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            break
        cum = np.cumsum(d2 / total)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        centers.append(points[min(idx, n - 1)])
    centers = np.array(centers)
    assign = None
    for _ in range(max_iterations):
        dist = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(centers.shape[0]):
            members = assign == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
    return centers, assign


@dataclass(frozen=True, eq=False)
class FmpResult:
    """Merged FMP regions plus the channel-to-cluster map needed for heat maps."""

    regions: BaseRegionSet
    masks: list[RegionMask]
    channel_cluster: dict[int, int]  # retained channel -> row index in regions


def fmp_detailed(t: CfmTensor, cfg: FmpConfig) -> FmpResult | None:
    """Cluster the raw per-channel regions and re-pool each cluster's mask union.

    Returns None when the tensor has no positive activation anywhere.
    Merged descriptors are recomputed from the union mask so overlapping
    member masks are not double counted.
    """
    raw = fmp_raw(t)
    if not raw:
        return None
    pts = np.stack([r.descriptor for r in raw])
    _, assign = _kmeans(pts, min(cfg.clusters, len(raw)), cfg.max_iterations, cfg.seed)
    flat = t.values.astype(np.float64).reshape(-1, t.channels)
    rows, masks, channel_cluster = [], [], {}
    for c in sorted(set(int(a) for a in assign)):
        members = [i for i in range(len(raw)) if assign[i] == c]
        union = np.zeros((t.height, t.width), dtype=bool)
        for i in members:
            union |= raw[i].mask.mask
        vec = flat[union.reshape(-1)].sum(axis=0)
        for i in members:
            channel_cluster[raw[i].channel] = len(rows)
        rows.append(unit_normalized(vec).vector)
        masks.append(RegionMask(union))
    return FmpResult(BaseRegionSet(np.stack(rows), Provenance.FMP), masks, channel_cluster)


def fmp(t: CfmTensor, cfg: FmpConfig) -> BaseRegionSet | None:
    res = fmp_detailed(t, cfg)
    return None if res is None else res.regions


def _axis_offsets(length: int, window: int, overlap: float) -> list[int]:
    if window >= length:
        return [0]
    n = 2
    while (length - window) / (n - 1) > (1.0 - overlap) * window:
        n += 1
    stride = (length - window) / (n - 1)
    return [int(np.floor(j * stride + 0.5)) for j in range(n)]


def sample_grid(height: int, width: int, cfg: OsppConfig, dedupe: bool = True) -> list[RectRegion]:
    """Square windows at each pyramid level.

    Level l uses windows of side floor(2*min(H, W)/(l+1)), clamped to the
    grid.  Along an axis the offsets are evenly spread so consecutive
    windows overlap by at least the configured fraction (up to one cell of
    rounding slack); identical windows produced by different levels are
    emitted once unless ``dedupe`` is off.
    """
    if height < 1 or width < 1:
        raise ValidationError(f"grid must be nonempty, got {height}x{width}")
    short = min(height, width)
    regions, seen = [], set()
    for level in range(1, cfg.scales + 1):
        w = 2 * short // (level + 1)
        w = max(1, min(w, short))
        for top in _axis_offsets(height, w, cfg.overlap):
            for left in _axis_offsets(width, w, cfg.overlap):
                key = (top, left, w)
                if dedupe:
                    if key in seen:
                        continue
                    seen.add(key)
                regions.append(RectRegion(top, left, w, w))
    return regions


def window_pool_rows(t: CfmTensor, cfg: OsppConfig, dedupe: bool = True) -> np.ndarray | None:
    """Unit-normalized max pool of every sampled window, before whitening.

    All-zero windows are dropped; returns None when every window drops.
    Also the sample source for fitting a whitening model on hold-outs.
    """
    rows = []
    for r in sample_grid(t.height, t.width, cfg, dedupe=dedupe):
        m = (
            t.values[r.top : r.top + r.height, r.left : r.left + r.width, :]
            .max(axis=(0, 1))
            .astype(np.float64)
        )
        if m.any():
            rows.append(m / np.linalg.norm(m))
    return np.stack(rows) if rows else None


def ospp(
    t: CfmTensor,
    cfg: OsppConfig,
    wm: WhiteningModel,
    dedupe: bool = True,
) -> BaseRegionSet | None:
    """Max-pool each sampled window, l2-normalize, whiten, l2-normalize.

    All-zero windows are dropped; returns None when every window is dropped.
    """
    if wm.input_dim != t.channels:
        raise ValidationError(
            f"whitening model expects dim {wm.input_dim}, tensor has {t.channels} channels"
        )
    raw = window_pool_rows(t, cfg, dedupe=dedupe)
    if raw is None:
        return None
    rows = []
    for m in raw:
        g = apply_whitening(wm, m)
        if not g.zero:
            rows.append(g.vector)
    if not rows:
        return None
    return BaseRegionSet(np.stack(rows), Provenance.OSPP)
