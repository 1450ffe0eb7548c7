"""Feature-map tensors, their on-disk format, and corpus manifests.

A feature-map tensor is an H x W x D stack of nonnegative activations; the
D values at one grid location form that location's local descriptor.  Tensors
are persisted in the ``CFM1`` binary layout:

    bytes 0..3    magic ``CFM1``
    bytes 4..15   H, W, D as unsigned 32-bit little-endian integers
    bytes 16..    H*W*D little-endian float32, row-major (h, then w, then d
                  fastest)

Corpus manifests are UTF-8 JSON documents with the keys ``entries``,
``queries`` and ``relevance``; tensor paths inside a manifest are resolved
relative to the manifest file's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

CFM_MAGIC = b"CFM1"
_HEADER = struct.Struct("<4sIII")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CfmTensor:
    """Immutable H x W x D activation tensor (float32, finite, nonnegative)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.size == 0:
            raise ValidationError(f"tensor must be a nonempty H x W x D array, got shape {self.values.shape}")
        bad = ~np.isfinite(v)
        if bad.any():
            h, w, d = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite value at (h={h}, w={w}, d={d})")
        neg = v < 0
        if neg.any():
            h, w, d = np.argwhere(neg)[0]
            raise ValidationError(f"negative value {v[h, w, d]} at (h={h}, w={w}, d={d})")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def local_descriptors(self) -> np.ndarray:
        """The (H*W) x D matrix of local descriptors, row-major over the grid."""
        return self.values.reshape(-1, self.values.shape[2])


@dataclass(frozen=True)
class CropBox:
    """Rectangle in feature-map grid coordinates (row/column, not pixels)."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"empty crop box {self}")
        if self.top < 0 or self.left < 0:
            raise ValidationError(f"crop box {self} has a negative corner")


def write_tensor(t: CfmTensor, path) -> None:
    """Write ``t`` to ``path`` in the CFM1 layout."""
    path = Path(path)
    header = _HEADER.pack(CFM_MAGIC, t.height, t.width, t.channels)
    payload = np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    try:
        path.write_bytes(header + payload)
    except OSError as e:
        raise OSError(f"cannot write tensor file {path}: {e}") from e


def read_tensor(path) -> CfmTensor:
    """Read and validate a CFM1 file; rejects bad magic, truncation and bad values."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read tensor file {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, need {_HEADER.size})")
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != CFM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if h == 0 or w == 0 or d == 0:
        raise ValidationError(f"{path}: zero dimension in header (H={h}, W={w}, D={d})")
    expected = _HEADER.size + 4 * h * w * d
    if len(raw) != expected:
        raise FormatError(f"{path}: payload ends at offset {len(raw)}, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    bad = ~np.isfinite(flat)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{path}: non-finite value at flat index {i} (offset {_HEADER.size + 4 * i})")
    neg = flat < 0
    if neg.any():
        i = int(np.flatnonzero(neg)[0])
        raise ValidationError(f"{path}: negative value {flat[i]} at flat index {i} (offset {_HEADER.size + 4 * i})")
    return CfmTensor(flat.reshape(h, w, d).copy())


def crop_tensor(t: CfmTensor, box: CropBox) -> CfmTensor:
    """Sub-tensor covering ``box``; all channels retained."""
    if box.top + box.height > t.height or box.left + box.width > t.width:
        raise ValidationError(
            f"crop box {box} exceeds tensor grid {t.height}x{t.width}"
        )
    sub = t.values[box.top : box.top + box.height, box.left : box.left + box.width, :]
    return CfmTensor(sub.copy())


# ---------------------------------------------------------------------------
# Corpus manifest


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    tensor_path: str
    label: str | None = None


@dataclass(frozen=True)
class QueryEntry:
    query_id: str
    tensor_path: str
    box: CropBox | None = None


@dataclass(frozen=True)
class Relevance:
    """Relevant and junk id sets for one query; the two must be disjoint."""

    relevant: frozenset[str]
    junk: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = self.relevant & self.junk
        if overlap:
            raise ValidationError(f"relevant and junk sets overlap: {sorted(overlap)[:5]}")


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    queries: list[QueryEntry] = field(default_factory=list)
    relevance: dict[str, Relevance] = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate image ids in manifest: {dup[:5]}")

    def entry_paths(self, base_dir) -> dict[str, Path]:
        base = Path(base_dir)
        return {e.image_id: base / e.tensor_path for e in self.entries}

    def check_paths(self, base_dir) -> None:
        """Verify that every referenced tensor file exists under ``base_dir``."""
        base = Path(base_dir)
        for item in [*self.entries, *self.queries]:
            p = base / item.tensor_path
            if not p.is_file():
                raise ValidationError(f"manifest references missing tensor file {p}")


def save_manifest(m: CorpusManifest, path) -> None:
    doc = {
        "entries": [
            {"id": e.image_id, "path": e.tensor_path, **({"label": e.label} if e.label else {})}
            for e in m.entries
        ],
        "queries": [
            {
                "id": q.query_id,
                "path": q.tensor_path,
                **({"box": [q.box.top, q.box.left, q.box.height, q.box.width]} if q.box else {}),
            }
            for q in m.queries
        ],
        "relevance": {
            qid: {"relevant": sorted(r.relevant), "junk": sorted(r.junk)}
            for qid, r in sorted(m.relevance.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, check_paths: bool = True) -> CorpusManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest root must be an object")
    entries = [
        ManifestEntry(e["id"], e["path"], e.get("label"))
        for e in doc.get("entries", [])
    ]
    queries = []
    for q in doc.get("queries", []):
        box = None
        if "box" in q and q["box"] is not None:
            box = CropBox(*(int(x) for x in q["box"]))
        queries.append(QueryEntry(q["id"], q["path"], box))
    relevance = {
        qid: Relevance(frozenset(r.get("relevant", [])), frozenset(r.get("junk", [])))
        for qid, r in doc.get("relevance", {}).items()
    }
    m = CorpusManifest(entries, queries, relevance)
    if check_paths:
        m.check_paths(path.parent)
    return m
