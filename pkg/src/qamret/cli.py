"""Command-line front end for indexing, search, evaluation, and heat maps.

Data goes to stdout (or the file named by --out); timings and warnings go
to stderr.  Exit codes: 0 success, 2 usage or validation problem, 1
internal error.  Ranked output is tab-separated with a header line so
test harnesses can diff it directly.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .aggregate import (
    AggregationConfig,
    AggregationMethod,
    clamped_dimensions,
    fit_whitening,
    load_descriptors,
    load_whitening,
    save_whitening,
    spoc,
)
from .base_regions import FmpConfig, OsppConfig, fmp_detailed
from .cfm_store import CropBox, crop_tensor, load_manifest, read_tensor, save_manifest
from .errors import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    ValidationError,
)
from .evalkit import (
    QueryJudgment,
    SyntheticSpec,
    UndefinedAPError,
    average_precision,
    convert_oxford_ground_truth,
    generate_synthetic,
    mean_ap,
)
from .pipeline import (
    IndexConfig,
    PipelineConfig,
    Reranker,
    Stage,
    build_index,
    holdout_descriptors,
    load_index,
    run_query,
    save_index,
)
from .qam import QamProblem, SolverStatus, merged_heatmap, solve


def write_pgm(m: np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5) with values round(255 * M), M expected in [0, 1]."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.min() < 0.0 or a.max() > 1.0:
        raise ValidationError("heat map must be a 2-D array with values in [0, 1]")
    pixels = np.floor(255.0 * a + 0.5).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _parse_crop(text: str) -> CropBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError(f"--crop wants top,left,height,width, got {text!r}")
    try:
        top, left, height, width = (int(p) for p in parts)
    except ValueError:
        raise ValidationError(f"--crop wants four integers, got {text!r}") from None
    return CropBox(top, left, height, width)


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("QAM_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"QAM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def _load_query_tensor(path: str, crop: str | None):
    t = read_tensor(path)
    if crop is not None:
        t = crop_tensor(t, _parse_crop(crop))
    return t


def _cmd_fit_whitening(args) -> int:
    src = Path(args.input)
    if src.suffix == ".json":
        manifest = load_manifest(src)
        rows = holdout_descriptors(manifest, src.parent, args.feature, args.L)
    else:
        rows = load_descriptors(src)
    dim = args.dim if args.dim is not None else rows.shape[1]
    model = fit_whitening(rows, dim)
    save_whitening(model, args.out)
    print(f"samples\t{rows.shape[0]}")
    print(f"retained_dimensions\t{model.output_dim}\tof\t{model.input_dim}")
    print(f"eigenvalue_floor_hits\t{clamped_dimensions(model)}")
    return 0


def _cmd_index(args) -> int:
    manifest = load_manifest(args.manifest)
    whitening = load_whitening(args.whitening) if args.whitening else None
    cfg = IndexConfig(
        aggregation=AggregationConfig(
            method=AggregationMethod(args.aggregation),
            scales=args.L,
            whitening=whitening,
        ),
        reranker=Reranker(args.reranker),
        fmp=FmpConfig(clusters=args.K, max_iterations=args.kmeans_iterations, seed=args.seed),
        ospp=OsppConfig(scales=args.L, overlap=args.overlap),
    )
    t0 = time.perf_counter()
    index = build_index(manifest, Path(args.manifest).parent, cfg)
    t1 = time.perf_counter()
    save_index(index, args.out)
    t2 = time.perf_counter()
    print(f"build\t{t1 - t0:.3f}s\tsave\t{t2 - t1:.3f}s", file=sys.stderr)
    print(args.out)
    return 0


def _final_stage(rerank_flag: str | None, qe: bool) -> Stage:
    if qe:
        return Stage.EXPANDED
    if rerank_flag is not None:
        return Stage.RERANKED
    return Stage.INITIAL


def _pipeline_config(args) -> PipelineConfig:
    if args.qe and args.rerank is None:
        raise ValidationError("--qe requires --rerank")
    reranker = Reranker(args.rerank) if args.rerank is not None else Reranker.NONE
    return PipelineConfig(shortlist=args.N, qe_depth=args.qe_depth, reranker=reranker)


def _cmd_search(args) -> int:
    index = load_index(args.index)
    qt = _load_query_tensor(args.query, args.crop)
    cfg = _pipeline_config(args)
    results = run_query(index, qt, cfg, threads=_threads(args))
    final = results[_final_stage(args.rerank, args.qe)]
    entries = final.entries if args.top is None else final.entries[: args.top]
    lines = []
    if args.top != 0:
        lines.append("rank\timage_id\tscore\tstage")
        for rank, (image_id, score) in enumerate(entries, start=1):
            lines.append(f"{rank}\t{image_id}\t{score!r}\t{final.stage.value}")
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval(args) -> int:
    index = load_index(args.index)
    manifest = load_manifest(args.manifest)
    if not manifest.queries:
        raise ValidationError("manifest has no queries to evaluate")
    base = Path(args.manifest).parent
    cfg = _pipeline_config(args)
    stages = [Stage.INITIAL]
    if args.rerank is not None:
        stages.append(Stage.RERANKED)
    if args.qe:
        stages.append(Stage.EXPANDED)
    threads = _threads(args)
    per_stage = {s: [] for s in stages}
    rows = []
    for q in manifest.queries:
        rel = manifest.relevance.get(q.query_id)
        if rel is None:
            raise ValidationError(f"no relevance judgments for query '{q.query_id}'")
        t = read_tensor(base / q.tensor_path)
        if q.box is not None:
            t = crop_tensor(t, q.box)
        results = run_query(index, t, cfg, threads=threads)
        judgment = QueryJudgment(rel.relevant, rel.junk)
        aps = [average_precision(results[s], judgment) for s in stages]
        for s, ap in zip(stages, aps):
            per_stage[s].append(ap)
        rows.append((q.query_id, aps))
    print("query_id\t" + "\t".join(s.value for s in stages))
    for query_id, aps in rows:
        print(query_id + "\t" + "\t".join(repr(ap) for ap in aps))
    print("mAP\t" + "\t".join(repr(mean_ap(per_stage[s])) for s in stages))
    return 0


def _cmd_heatmap(args) -> int:
    index = load_index(args.index)
    paths = index.snapshot.get("tensor_paths", {})
    if args.image_id not in paths:
        raise ValidationError(f"unknown image id '{args.image_id}'")
    t = read_tensor(paths[args.image_id])
    if args.mode == "l1norm":
        m = t.values.astype(np.float64).sum(axis=2)
        peak = m.max()
        m = m / peak if peak > 0 else np.zeros_like(m)
    else:
        snapshot_reranker = index.snapshot.get("reranker")
        if snapshot_reranker != Reranker.FMP.value:
            raise ConfigurationError(
                "merged maps need channel-mask regions; this index was built with "
                f"reranker '{snapshot_reranker}'"
            )
        fmp_cfg = FmpConfig(**{k: int(v) for k, v in index.snapshot["fmp"].items()})
        detail = fmp_detailed(t, fmp_cfg)
        q = spoc(_load_query_tensor(args.query, args.crop))
        if detail is None or q.zero:
            print("warning: no usable regions; writing a zero map", file=sys.stderr)
            m = np.zeros((t.height, t.width))
        else:
            sol = solve(QamProblem(q.vector, detail.regions))
            if sol.status is SolverStatus.INFEASIBLE:
                print(
                    "warning: no positively correlated region; writing a zero map",
                    file=sys.stderr,
                )
                m = np.zeros((t.height, t.width))
            else:
                m = merged_heatmap(t, detail.channel_cluster, sol.weights)
    write_pgm(m, args.out)
    print(args.out)
    return 0


def _cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        clutter_density=args.density,
        noise_scale=args.noise,
        relevant=args.relevant,
        distractors=args.distractors,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out_dir)
    print(str(Path(args.out_dir) / "manifest.json"))
    print(f"images\t{len(manifest.entries)}\tqueries\t{len(manifest.queries)}", file=sys.stderr)
    return 0


def _cmd_convert_oxford_gt(args) -> int:
    manifest = convert_oxford_ground_truth(
        args.gt_dir,
        tensor_dir=args.tensor_dir,
        grid_scale=args.grid_scale,
        strip_prefix=args.strip_prefix,
    )
    save_manifest(manifest, args.out)
    print(args.out)
    return 0


def _add_pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--rerank", choices=["fmp", "ospp"], default=None,
                   help="rescore the shortlist with this region type")
    p.add_argument("--qe", action="store_true", help="expand the query after reranking")
    p.add_argument("--N", type=int, default=100, help="shortlist size (default 100)")
    p.add_argument("--qe-depth", type=int, default=5,
                   help="reranked images averaged into the expanded query (default 5)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: QAM_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qamret",
        description="Instance retrieval over convolutional feature maps with "
        "query-adaptive region matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-whitening", help="fit a whitening model on hold-out descriptors")
    p.add_argument("input", help="DSC1 descriptor file, or a manifest .json of hold-out tensors")
    p.add_argument("out", help="output model file")
    p.add_argument("--dim", type=int, default=None, help="output dimensions (default: all)")
    p.add_argument("--feature", choices=["region-max", "spoc"], default="region-max",
                   help="descriptor type when the input is a manifest")
    p.add_argument("--L", type=int, default=3, help="pyramid levels for region-max (default 3)")
    p.set_defaults(func=_cmd_fit_whitening)

    p = sub.add_parser("index", help="build and save a descriptor index")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--aggregation", choices=["spoc", "rmac"], default="spoc")
    p.add_argument("--reranker", choices=["fmp", "ospp", "none"], default="fmp")
    p.add_argument("--K", type=int, default=25, help="channel-region clusters (default 25)")
    p.add_argument("--L", type=int, default=3, help="pyramid levels (default 3)")
    p.add_argument("--overlap", type=float, default=0.4, help="window overlap (default 0.4)")
    p.add_argument("--seed", type=int, default=0, help="clustering seed (default 0)")
    p.add_argument("--kmeans-iterations", type=int, default=100)
    p.add_argument("--whitening", default=None, help="whitening model file")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("search", help="rank the corpus for one query tensor")
    p.add_argument("index")
    p.add_argument("query", help="query tensor file")
    p.add_argument("--crop", default=None, help="query crop as top,left,height,width")
    p.add_argument("--top", type=int, default=None, help="rows to emit (default: all)")
    p.add_argument("--out", default=None, help="write rows to this file instead of stdout")
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", help="per-query AP and corpus mAP per stage")
    p.add_argument("index")
    p.add_argument("manifest")
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("heatmap", help="write a PGM heat map for one indexed image")
    p.add_argument("index")
    p.add_argument("query", help="query tensor file")
    p.add_argument("image_id")
    p.add_argument("out", help="output .pgm file")
    p.add_argument("--mode", choices=["merged", "l1norm"], default="merged")
    p.add_argument("--crop", default=None, help="query crop as top,left,height,width")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("gen-synthetic", help="generate a planted-signature test corpus")
    p.add_argument("out_dir")
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--relevant", type=int, default=20)
    p.add_argument("--distractors", type=int, default=200)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("convert-oxford-gt", help="Oxford-style ground truth to a manifest")
    p.add_argument("gt_dir")
    p.add_argument("out", help="output manifest .json")
    p.add_argument("--tensor-dir", default=None)
    p.add_argument("--grid-scale", type=float, default=1.0,
                   help="feature-grid cells per image pixel")
    p.add_argument("--strip-prefix", default="oxc1_")
    p.set_defaults(func=_cmd_convert_oxford_gt)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ValidationError,
        ConfigurationError,
        FormatError,
        InsufficientDataError,
        UndefinedAPError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
