"""Retrieval scoring and synthetic corpus generation.

Average precision follows the Oxford buildings convention: junk ids are
dropped from the ranked list before scoring, precision/recall start at
(1, 0), and each retained position contributes a trapezoid
(r - r_prev) * (p + p_prev) / 2.  Relevant items missing from the list
add nothing (their recall mass sits at precision zero).

The synthetic generator plants a small positive activation block into
cluttered tensors so the whole retrieval chain can be verified end to
end in seconds on one core.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfm_store import (
    CfmTensor,
    CorpusManifest,
    CropBox,
    ManifestEntry,
    QueryEntry,
    Relevance,
    save_manifest,
    write_tensor,
)
from .errors import ValidationError


class UndefinedAPError(ValueError):
    """Raised when a query has no relevant items, making AP meaningless."""


@dataclass(frozen=True)
class QueryJudgment:
    relevant: frozenset
    junk: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        object.__setattr__(self, "junk", frozenset(self.junk))
        if self.relevant & self.junk:
            raise ValidationError("relevant and junk sets overlap")


def _ranked_ids(ranked) -> list[str]:
    ids = getattr(ranked, "ids", ranked)
    return list(ids)


def average_precision(ranked, judgment) -> float:
    """AP of a ranked id list; accepts anything with ``.ids`` or an id iterable."""
    relevant, junk = judgment.relevant, judgment.junk
    if not relevant:
        raise UndefinedAPError("AP is undefined for a query with no relevant items")
    hits = 0
    kept = 0
    recall, precision = 0.0, 1.0
    ap = 0.0
    for image_id in _ranked_ids(ranked):
        if image_id in junk:
            continue
        kept += 1
        if image_id in relevant:
            hits += 1
        new_recall = hits / len(relevant)
        new_precision = hits / kept
        ap += (new_recall - recall) * (new_precision + precision) / 2.0
        recall, precision = new_recall, new_precision
    return ap


def mean_ap(aps) -> float:
    values = [float(a) for a in aps]
    if not values:
        raise UndefinedAPError("mean AP over zero queries is undefined")
    return float(np.mean(values))


def make_block_signature(
    height: int = 4,
    width: int = 4,
    channels: int = 32,
    active_channels: int = 8,
    low: float = 1.0,
    high: float = 2.0,
    seed: int = 0,
) -> np.ndarray:
    """Dense positive block on a random channel subset, zero elsewhere.

    Draw order: the active channel indices (choice without replacement),
    then one uniform block of values for them.
    """
    if not 1 <= active_channels <= channels:
        raise ValidationError(
            f"active_channels must be in [1, {channels}], got {active_channels}"
        )
    if not 0 < low <= high:
        raise ValidationError(f"need 0 < low <= high, got ({low}, {high})")
    rng = np.random.default_rng(seed)
    chans = rng.choice(channels, size=active_channels, replace=False)
    block = np.zeros((height, width, channels), dtype=np.float64)
    block[:, :, np.sort(chans)] = rng.uniform(low, high, (height, width, active_channels))
    return block


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    height: int = 16
    width: int = 16
    channels: int = 32
    signature: np.ndarray | None = None  # defaults to make_block_signature(seed=seed)
    clutter_density: float = 0.3
    noise_scale: float = 2.0
    relevant: int = 20
    distractors: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValidationError("grid dimensions must be positive")
        if not 0.0 <= self.clutter_density <= 1.0:
            raise ValidationError(f"clutter_density must be in [0, 1], got {self.clutter_density}")
        if self.noise_scale < 0:
            raise ValidationError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.relevant < 0 or self.distractors < 0:
            raise ValidationError("counts must be >= 0")
        sig = self.signature
        if sig is None:
            sig = make_block_signature(channels=self.channels, seed=self.seed)
        sig = np.asarray(sig, dtype=np.float64)
        if sig.ndim != 3 or sig.shape[2] != self.channels:
            raise ValidationError(
                f"signature must be h x w x {self.channels}, got shape {sig.shape}"
            )
        if sig.shape[0] > self.height or sig.shape[1] > self.width:
            raise ValidationError(
                f"signature {sig.shape[:2]} does not fit the {self.height}x{self.width} grid"
            )
        if (sig < 0).any() or not np.isfinite(sig).all() or not (sig > 0).any():
            raise ValidationError("signature must be finite, nonnegative, and not all zero")
        sig.flags.writeable = False
        object.__setattr__(self, "signature", sig)


def _clutter(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """One clutter field: sparse positive noise with per-image channel gains.

    Channels respond selectively (as post-activation feature channels do),
    so each image first draws a gain per channel (squared uniform, most
    channels weak), then an elementwise sparse mask at the configured
    density, then uniform values scaled by noise_scale times the gain.
    Draw order: gains, mask, values, each full-shape.
    """
    shape = (spec.height, spec.width, spec.channels)
    gains = rng.random(spec.channels) ** 2
    mask = rng.random(shape) < spec.clutter_density
    values = rng.random(shape) * spec.noise_scale * gains[None, None, :]
    return np.where(mask, values, 0.0)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> CorpusManifest:
    """Write one tensor file per image plus ``manifest.json``; return the manifest.

    Per relevant image the draw order is clutter mask, clutter values,
    placement row, placement column; distractors draw only the clutter
    pair.  The single query tensor is the clean signature block.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    sig = spec.signature
    sh, sw = sig.shape[0], sig.shape[1]
    entries = []
    relevant_ids = []

    def emit(image_id: str, values: np.ndarray, label: str):
        t = CfmTensor(values.astype(np.float32))
        write_tensor(t, out / f"{image_id}.cfm")
        entries.append(ManifestEntry(image_id, f"{image_id}.cfm", label=label))

    for i in range(spec.relevant):
        base = _clutter(rng, spec)
        top = int(rng.integers(spec.height - sh + 1))
        left = int(rng.integers(spec.width - sw + 1))
        base[top : top + sh, left : left + sw, :] += sig
        image_id = f"relevant-{i:03d}"
        emit(image_id, base, "relevant")
        relevant_ids.append(image_id)

    for i in range(spec.distractors):
        emit(f"distractor-{i:03d}", _clutter(rng, spec), "distractor")

    query_id = "query"
    query_tensor = CfmTensor(sig.astype(np.float32))
    write_tensor(query_tensor, out / f"{query_id}.cfm")
    manifest = CorpusManifest(
        entries=tuple(entries),
        queries=(QueryEntry(query_id, f"{query_id}.cfm"),),
        relevance={query_id: Relevance(frozenset(relevant_ids))},
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest


def _read_id_list(path: Path) -> list[str]:
    if not path.exists():
        return []
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def convert_oxford_ground_truth(
    gt_dir: str | Path,
    tensor_dir: str | Path | None = None,
    grid_scale: float = 1.0,
    strip_prefix: str = "oxc1_",
) -> CorpusManifest:
    """Build a manifest from Oxford-style ground-truth text files.

    For every ``<name>_query.txt`` (line: image id, x1, y1, x2, y2 in
    pixels) the good and ok lists become the relevant set and the junk
    list the junk set.  Pixel boxes map to grid cells through
    ``grid_scale`` (cells per pixel), floor on the near corner and ceil
    on the far one.  Database entries are the ``*.cfm`` files found in
    ``tensor_dir`` when given, otherwise every id the files mention.
    """
    gt = Path(gt_dir)
    query_files = sorted(gt.glob("*_query.txt"))
    if not query_files:
        raise ValidationError(f"no *_query.txt files under {gt}")
    if grid_scale <= 0:
        raise ValidationError(f"grid_scale must be positive, got {grid_scale}")
    queries = []
    relevance = {}
    mentioned = set()
    for qf in query_files:
        name = qf.name[: -len("_query.txt")]
        parts = qf.read_text().split()
        if len(parts) != 5:
            raise ValidationError(f"{qf}: expected 'id x1 y1 x2 y2', got {parts!r}")
        image_id = parts[0]
        if image_id.startswith(strip_prefix):
            image_id = image_id[len(strip_prefix) :]
        x1, y1, x2, y2 = (float(v) for v in parts[1:])
        if not (x2 > x1 and y2 > y1):
            raise ValidationError(f"{qf}: degenerate box {(x1, y1, x2, y2)}")
        top = int(np.floor(y1 * grid_scale))
        left = int(np.floor(x1 * grid_scale))
        bottom = max(int(np.ceil(y2 * grid_scale)), top + 1)
        right = max(int(np.ceil(x2 * grid_scale)), left + 1)
        box = CropBox(top, left, bottom - top, right - left)
        good = _read_id_list(gt / f"{name}_good.txt")
        ok = _read_id_list(gt / f"{name}_ok.txt")
        junk = _read_id_list(gt / f"{name}_junk.txt")
        relevant = frozenset(good) | frozenset(ok)
        if not relevant:
            raise ValidationError(f"query {name} has no good or ok images")
        queries.append(QueryEntry(name, f"{image_id}.cfm", box=box))
        relevance[name] = Relevance(relevant, frozenset(junk) - relevant)
        mentioned.add(image_id)
        mentioned |= relevant | frozenset(junk)
    if tensor_dir is not None:
        ids = sorted(p.stem for p in Path(tensor_dir).glob("*.cfm"))
    else:
        ids = sorted(mentioned)
    entries = tuple(ManifestEntry(i, f"{i}.cfm") for i in ids)
    return CorpusManifest(entries=entries, queries=tuple(queries), relevance=relevance)


def judgment_from_relevance(rel: Relevance) -> QueryJudgment:
    return QueryJudgment(rel.relevant, rel.junk)


def load_judgments(manifest: CorpusManifest) -> dict[str, QueryJudgment]:
    return {qid: judgment_from_relevance(rel) for qid, rel in manifest.relevance.items()}
