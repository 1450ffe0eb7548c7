#!/usr/bin/env python3
"""Measure retrieval quality on planted-signature corpora.

Generates a batch of synthetic corpora (one planted block signature per
corpus, cluttered with channel-correlated noise), runs the three-stage
pipeline on each, and reports per-seed and mean average precision for
the initial, reranked, and expanded rankings.
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

from qamret import (
    FmpConfig,
    IndexConfig,
    PipelineConfig,
    Reranker,
    Stage,
    SyntheticSpec,
    average_precision,
    build_index,
    generate_synthetic,
    load_judgments,
    mean_ap,
    read_tensor,
    run_query,
)

STAGES = (Stage.INITIAL, Stage.RERANKED, Stage.EXPANDED)


def run_seed(seed, args, work_dir):
    spec = SyntheticSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        clutter_density=args.density,
        noise_scale=args.noise,
        relevant=args.relevant,
        distractors=args.distractors,
        seed=seed,
    )
    corpus_dir = Path(work_dir) / f"seed{seed}"
    manifest = generate_synthetic(spec, corpus_dir)
    index = build_index(
        manifest,
        corpus_dir,
        IndexConfig(reranker=Reranker.FMP, fmp=FmpConfig(clusters=args.clusters)),
    )
    query = manifest.queries[0]
    tensor = read_tensor(corpus_dir / query.tensor_path)
    results = run_query(
        index,
        tensor,
        PipelineConfig(shortlist=args.shortlist, qe_depth=args.qe_depth),
    )
    judgment = load_judgments(manifest)[query.query_id]
    return {stage: average_precision(results[stage], judgment) for stage in STAGES}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10, help="number of corpora")
    parser.add_argument("--height", type=int, default=16)
    parser.add_argument("--width", type=int, default=16)
    parser.add_argument("--channels", type=int, default=32)
    parser.add_argument("--relevant", type=int, default=20)
    parser.add_argument("--distractors", type=int, default=200)
    parser.add_argument("--density", type=float, default=0.3, help="clutter density")
    parser.add_argument("--noise", type=float, default=2.0, help="clutter amplitude scale")
    parser.add_argument("--clusters", type=int, default=8, help="channel clusters per image")
    parser.add_argument("--shortlist", type=int, default=100)
    parser.add_argument("--qe-depth", type=int, default=5)
    parser.add_argument(
        "--keep", type=Path, default=None, help="write corpora here instead of a tempdir"
    )
    args = parser.parse_args(argv)

    def report(work_dir):
        per_stage = {stage: [] for stage in STAGES}
        print("seed\t" + "\t".join(stage.value for stage in STAGES))
        start = time.perf_counter()
        for seed in range(args.seeds):
            aps = run_seed(seed, args, work_dir)
            for stage in STAGES:
                per_stage[stage].append(aps[stage])
            print(f"{seed}\t" + "\t".join(f"{aps[stage]:.4f}" for stage in STAGES))
        elapsed = time.perf_counter() - start
        print("mean\t" + "\t".join(f"{mean_ap(per_stage[stage]):.4f}" for stage in STAGES))
        print(f"elapsed\t{elapsed:.1f}s", file=sys.stderr)

    if args.keep is not None:
        report(args.keep)
    else:
        with tempfile.TemporaryDirectory() as work_dir:
            report(work_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
