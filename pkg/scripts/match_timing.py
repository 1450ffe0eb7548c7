#!/usr/bin/env python3
"""Time the constrained matcher across region counts and dimensions.

Each row reports the best-of-N wall time for a single similarity
evaluation on a random region set with unit query, after one warm-up
call per configuration.
"""

import argparse
import sys
import time

import numpy as np

from qamret import BaseRegionSet, Provenance, qam_similarity


def unit_rows(rng, count, dim):
    rows = rng.standard_normal((count, dim))
    rows = np.abs(rows)  # keep the feasible case common
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows


def time_one(rng, count, dim, repeats):
    regions = BaseRegionSet(unit_rows(rng, count, dim), Provenance.FMP)
    query = rng.standard_normal(dim)
    query /= np.linalg.norm(query)
    qam_similarity(query, regions)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        qam_similarity(query, regions)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--counts", type=int, nargs="+", default=[5, 10, 25, 50], help="region counts"
    )
    parser.add_argument(
        "--dims", type=int, nargs="+", default=[32, 128, 512], help="descriptor dimensions"
    )
    parser.add_argument("--repeats", type=int, default=5, help="timed runs per cell")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print("regions\tdim\tbest_ms")
    for count in args.counts:
        for dim in args.dims:
            best = time_one(rng, count, dim, args.repeats)
            print(f"{count}\t{dim}\t{best * 1e3:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
