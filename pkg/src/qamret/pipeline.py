"""Three-stage retrieval over a persisted descriptor index.

Stage one scores every image by inner product against the query's
global descriptor.  Stage two rescores the top-N shortlist with the
query-adaptive match against each candidate's base-region set.  Stage
three averages the query with the top few reranked globals and searches
again.  All stages are exact (no approximate search) and deterministic;
ties break by ascending image id.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .aggregate import (
    AggregationConfig,
    AggregationMethod,
    GlobalDescriptor,
    WhiteningModel,
    aggregate_global,
    spoc,
    unit_normalized,
)
from .base_regions import (
    BaseRegionSet,
    FmpConfig,
    OsppConfig,
    Provenance,
    fmp,
    ospp,
    window_pool_rows,
)
from .cfm_store import CfmTensor, CorpusManifest, read_tensor
from .errors import ConfigurationError, FormatError, ValidationError
from .qam import QamProblem, SolverConfig, solve

INDEX_MAGIC = b"IDX1"


class Stage(str, Enum):
    INITIAL = "initial"
    RERANKED = "reranked"
    EXPANDED = "expanded"


class Reranker(str, Enum):
    FMP = "fmp"
    OSPP = "ospp"
    NONE = "none"


@dataclass(frozen=True)
class PipelineConfig:
    shortlist: int = 100
    qe_depth: int = 5
    reranker: Reranker = Reranker.FMP

    def __post_init__(self):
        if self.shortlist < 1:
            raise ValidationError(f"shortlist must be >= 1, got {self.shortlist}")
        if self.qe_depth < 1:
            raise ValidationError(f"qe_depth must be >= 1, got {self.qe_depth}")


@dataclass(frozen=True)
class IndexConfig:
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    reranker: Reranker = Reranker.FMP
    fmp: FmpConfig = field(default_factory=FmpConfig)
    ospp: OsppConfig = field(default_factory=OsppConfig)

    def __post_init__(self):
        if self.reranker is Reranker.OSPP and self.aggregation.whitening is None:
            raise ConfigurationError("window-pooled regions require a whitening model")


@dataclass(frozen=True, eq=False)
class RankedList:
    """Ordered (image id, score) pairs for one query at one stage.

    Scores are non-increasing for search stages.  A reranked list is
    exempt: the rescored shortlist and the appended tail are ordered
    internally, but the boundary between them may step in either
    direction because the two halves are on different scales.
    """

    entries: tuple
    stage: Stage

    def __post_init__(self):
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("ranked list contains duplicate image ids")
        if self.stage is not Stage.RERANKED:
            scores = [s for _, s in entries]
            for a, b in zip(scores, scores[1:]):
                if b > a:
                    raise ValidationError("scores must be non-increasing")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class DescriptorIndex:
    image_ids: tuple
    globals_matrix: np.ndarray  # N x D float64, float32-quantized values
    region_sets: tuple  # per image: BaseRegionSet | None
    whitening: WhiteningModel | None
    snapshot: dict

    def __post_init__(self):
        g = np.asarray(self.globals_matrix, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != len(self.image_ids):
            raise ValidationError(
                f"globals matrix {g.shape} does not match {len(self.image_ids)} ids"
            )
        if len(self.region_sets) != len(self.image_ids):
            raise ValidationError("one region set slot per image required")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValidationError("duplicate image ids in index")
        norms = np.linalg.norm(g, axis=1)
        bad = np.flatnonzero((np.abs(norms - 1.0) > 1e-6) & (norms != 0.0))
        if bad.size:
            raise ValidationError(
                f"global descriptor for '{self.image_ids[bad[0]]}' is neither unit nor zero"
            )
        g.flags.writeable = False
        object.__setattr__(self, "globals_matrix", g)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "region_sets", tuple(self.region_sets))

    @property
    def size(self) -> int:
        return len(self.image_ids)

    @property
    def dim(self) -> int:
        return self.globals_matrix.shape[1]

    def global_for(self, image_id: str) -> np.ndarray:
        return self.globals_matrix[self.image_ids.index(image_id)]


def _quantize(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _region_set_for(t: CfmTensor, cfg: IndexConfig) -> BaseRegionSet | None:
    if cfg.reranker is Reranker.NONE:
        return None
    if cfg.reranker is Reranker.FMP:
        rs = fmp(t, cfg.fmp)
    else:
        rs = ospp(t, cfg.ospp, cfg.aggregation.whitening)
    if rs is None:
        return None
    return BaseRegionSet(_quantize(rs.descriptors), rs.provenance)


def build_index(
    manifest: CorpusManifest,
    base_dir: str | Path,
    config: IndexConfig | None = None,
) -> DescriptorIndex:
    """Aggregate a global descriptor and a base-region set for every entry.

    Descriptor values are quantized to float32 precision up front so a
    freshly built index and one loaded from disk are bit-identical.
    """
    cfg = config or IndexConfig()
    if not manifest.entries:
        raise ValidationError("manifest has no entries to index")
    base = Path(base_dir)
    ids, globals_rows, region_sets = [], [], []
    for entry in manifest.entries:
        try:
            t = read_tensor(base / entry.tensor_path)
        except (OSError, ValueError) as e:
            raise FormatError(f"image '{entry.image_id}': {e}") from e
        ids.append(entry.image_id)
        globals_rows.append(_quantize(aggregate_global(t, cfg.aggregation).vector))
        region_sets.append(_region_set_for(t, cfg))
    snapshot = _config_snapshot(cfg, manifest, base)
    return DescriptorIndex(
        tuple(ids),
        np.stack(globals_rows),
        tuple(region_sets),
        cfg.aggregation.whitening,
        snapshot,
    )


def _config_snapshot(cfg: IndexConfig, manifest: CorpusManifest, base: Path) -> dict:
    return {
        "aggregation": {
            "method": cfg.aggregation.method.value,
            "scales": cfg.aggregation.scales,
            "whitened": cfg.aggregation.whitening is not None,
        },
        "reranker": cfg.reranker.value,
        "fmp": {
            "clusters": cfg.fmp.clusters,
            "max_iterations": cfg.fmp.max_iterations,
            "seed": cfg.fmp.seed,
        },
        "ospp": {"scales": cfg.ospp.scales, "overlap": cfg.ospp.overlap},
        "tensor_paths": {
            e.image_id: str((base / e.tensor_path).resolve()) for e in manifest.entries
        },
    }


def index_config_from_snapshot(snapshot: dict, whitening: WhiteningModel | None) -> IndexConfig:
    agg = snapshot["aggregation"]
    return IndexConfig(
        aggregation=AggregationConfig(
            method=AggregationMethod(agg["method"]),
            scales=int(agg["scales"]),
            whitening=whitening if agg["whitened"] else None,
        ),
        reranker=Reranker(snapshot["reranker"]),
        fmp=FmpConfig(**{k: int(v) for k, v in snapshot["fmp"].items()}),
        ospp=OsppConfig(int(snapshot["ospp"]["scales"]), float(snapshot["ospp"]["overlap"])),
    )


def initial_search(index: DescriptorIndex, query: GlobalDescriptor) -> RankedList:
    return _inner_product_ranking(index, query, Stage.INITIAL)


def _inner_product_ranking(
    index: DescriptorIndex, query: GlobalDescriptor, stage: Stage
) -> RankedList:
    if query.dim != index.dim:
        raise ValidationError(f"query dim {query.dim} does not match index dim {index.dim}")
    scores = index.globals_matrix @ query.vector
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.image_ids[i]))
    return RankedList(tuple((index.image_ids[i], float(scores[i])) for i in order), stage)


def query_feature(
    index: DescriptorIndex, query_tensor: CfmTensor, reranker: Reranker
) -> GlobalDescriptor:
    """The query-side descriptor the configured reranker matches against.

    Channel-mask regions are built from raw activations, so the query is
    plain sum pooling; window regions are whitened max pools, so the
    query is the regional-max aggregate under the index's whitening.
    """
    if reranker is Reranker.FMP:
        return spoc(query_tensor)
    if reranker is Reranker.OSPP:
        if index.whitening is None:
            raise ConfigurationError("index has no whitening model for window regions")
        scales = int(index.snapshot["ospp"]["scales"])
        cfg = AggregationConfig(AggregationMethod.RMAC, scales=scales, whitening=index.whitening)
        return aggregate_global(query_tensor, cfg)
    raise ConfigurationError("reranker 'none' has no query feature")


def rerank(
    index: DescriptorIndex,
    query_tensor: CfmTensor,
    initial: RankedList,
    config: PipelineConfig | None = None,
    solver: SolverConfig | None = None,
    threads: int = 1,
) -> RankedList:
    """Rescore the top-N shortlist by query-adaptive matching.

    Candidates without a region set keep their initial score, the
    shortlist is re-sorted by the new scores (ties by initial score,
    then id), and everything beyond the shortlist keeps its initial
    order.  The shortlist membership never changes.
    """
    cfg = config or PipelineConfig()
    if cfg.reranker is Reranker.NONE:
        raise ConfigurationError("rerank called with reranker 'none'")
    if not initial.entries:
        raise ValidationError("initial ranking is empty")
    stored = Provenance.FMP if cfg.reranker is Reranker.FMP else Provenance.OSPP
    for rs in index.region_sets:
        if rs is not None and rs.provenance is not stored:
            raise ConfigurationError(
                f"index stores {rs.provenance.value} regions, reranker wants {stored.value}"
            )
    if all(rs is None for rs in index.region_sets):
        raise ConfigurationError("index stores no region sets; rebuild with a reranker")

    q = query_feature(index, query_tensor, cfg.reranker)
    shortlist = initial.entries[: cfg.shortlist]
    tail = initial.entries[cfg.shortlist :]
    if q.zero:
        scored = list(shortlist)
    else:
        lookup = {image_id: i for i, image_id in enumerate(index.image_ids)}

        def score(entry):
            image_id, initial_score = entry
            rs = index.region_sets[lookup[image_id]]
            if rs is None:
                return image_id, initial_score
            return image_id, solve(QamProblem(q.vector, rs), solver).similarity

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                scored = list(pool.map(score, shortlist))
        else:
            scored = [score(e) for e in shortlist]
    initial_score = dict(shortlist)
    scored.sort(key=lambda e: (-e[1], -initial_score[e[0]], e[0]))
    return RankedList(tuple(scored) + tail, Stage.RERANKED)


def query_expansion(
    index: DescriptorIndex,
    query: GlobalDescriptor,
    reranked: RankedList,
    config: PipelineConfig | None = None,
) -> RankedList:
    """Search again with the normalized mean of the query and top globals."""
    cfg = config or PipelineConfig()
    if not reranked.entries:
        raise ValidationError("ranked list is empty")
    top = reranked.ids[: cfg.qe_depth]
    vectors = [query.vector] + [index.global_for(i) for i in top]
    expanded = unit_normalized(np.mean(vectors, axis=0))
    return _inner_product_ranking(index, expanded, Stage.EXPANDED)


def run_query(
    index: DescriptorIndex,
    query_tensor: CfmTensor,
    config: PipelineConfig | None = None,
    solver: SolverConfig | None = None,
    threads: int = 1,
) -> dict[Stage, RankedList]:
    """All applicable stages for one query tensor, keyed by stage."""
    cfg = config or PipelineConfig()
    agg = index_config_from_snapshot(index.snapshot, index.whitening).aggregation
    q = aggregate_global(query_tensor, agg)
    out = {Stage.INITIAL: initial_search(index, q)}
    if cfg.reranker is not Reranker.NONE:
        out[Stage.RERANKED] = rerank(index, query_tensor, out[Stage.INITIAL], cfg, solver, threads)
        out[Stage.EXPANDED] = query_expansion(index, q, out[Stage.RERANKED], cfg)
    return out


def holdout_descriptors(
    manifest: CorpusManifest,
    base_dir: str | Path,
    feature: str = "region-max",
    scales: int = 3,
) -> np.ndarray:
    """Whitening-fit samples from a hold-out corpus, one row per descriptor.

    ``region-max``: unit max pools of every sampled window (what window
    regions and regional-max globals whiten).  ``spoc``: the unit sum-pooled
    descriptor of each image.  All-zero images or windows are skipped.
    """
    if feature not in ("region-max", "spoc"):
        raise ValidationError(f"unknown feature '{feature}' (want region-max or spoc)")
    base = Path(base_dir)
    rows = []
    for entry in manifest.entries:
        try:
            t = read_tensor(base / entry.tensor_path)
        except (OSError, ValueError) as e:
            raise FormatError(f"image '{entry.image_id}': {e}") from e
        if feature == "spoc":
            g = spoc(t)
            if not g.zero:
                rows.append(g.vector)
        else:
            pooled = window_pool_rows(t, OsppConfig(scales=scales))
            if pooled is not None:
                rows.extend(pooled)
    if not rows:
        raise ValidationError("hold-out corpus produced no descriptors")
    return np.stack(rows)


def _read_exact(fh, n: int, section: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"index file truncated in section '{section}'")
    return data


def _write_array_f32(fh, a: np.ndarray):
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_array_f32(fh, count: int, section: str) -> np.ndarray:
    raw = _read_exact(fh, 4 * count, section)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def save_index(index: DescriptorIndex, path: str | Path) -> None:
    """IDX1 binary layout: ids, globals, whitening, region sets, snapshot JSON."""
    with open(Path(path), "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", index.size))
        for image_id in index.image_ids:
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        n, d = index.globals_matrix.shape
        fh.write(struct.pack("<II", n, d))
        _write_array_f32(fh, index.globals_matrix)
        if index.whitening is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<II", index.whitening.input_dim, index.whitening.output_dim))
            _write_array_f32(fh, index.whitening.mean)
            _write_array_f32(fh, index.whitening.projection)
        provenances = {rs.provenance for rs in index.region_sets if rs is not None}
        code = 0 if not provenances else (1 if provenances == {Provenance.FMP} else 2)
        fh.write(struct.pack("<B", code))
        for rs in index.region_sets:
            if rs is None:
                fh.write(struct.pack("<I", 0))
            else:
                fh.write(struct.pack("<II", rs.count, rs.dim))
                _write_array_f32(fh, rs.descriptors)
        raw = json.dumps(index.snapshot, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def load_index(path: str | Path) -> DescriptorIndex:
    with open(Path(path), "rb") as fh:
        if _read_exact(fh, 4, "magic") != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file (bad magic)")
        (n,) = struct.unpack("<I", _read_exact(fh, 4, "ids"))
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack("<I", _read_exact(fh, 4, "ids"))
            ids.append(_read_exact(fh, ln, "ids").decode("utf-8"))
        n2, d = struct.unpack("<II", _read_exact(fh, 8, "globals"))
        if n2 != n:
            raise FormatError(f"index file corrupt: {n} ids but {n2} globals")
        globals_matrix = _read_array_f32(fh, n * d, "globals").reshape(n, d)
        (has_whitening,) = struct.unpack("<B", _read_exact(fh, 1, "whitening"))
        whitening = None
        if has_whitening:
            din, dout = struct.unpack("<II", _read_exact(fh, 8, "whitening"))
            mean = _read_array_f32(fh, din, "whitening")
            projection = _read_array_f32(fh, dout * din, "whitening").reshape(dout, din)
            whitening = WhiteningModel(mean, projection)
        (code,) = struct.unpack("<B", _read_exact(fh, 1, "regions"))
        provenance = {1: Provenance.FMP, 2: Provenance.OSPP}.get(code)
        region_sets = []
        for _ in range(n):
            (k,) = struct.unpack("<I", _read_exact(fh, 4, "regions"))
            if k == 0:
                region_sets.append(None)
                continue
            if provenance is None:
                raise FormatError("index file corrupt: region rows without a provenance code")
            (dr,) = struct.unpack("<I", _read_exact(fh, 4, "regions"))
            rows = _read_array_f32(fh, k * dr, "regions").reshape(k, dr)
            region_sets.append(BaseRegionSet(rows, provenance))
        (ln,) = struct.unpack("<I", _read_exact(fh, 4, "snapshot"))
        snapshot = json.loads(_read_exact(fh, ln, "snapshot").decode("utf-8"))
    return DescriptorIndex(tuple(ids), globals_matrix, tuple(region_sets), whitening, snapshot)
