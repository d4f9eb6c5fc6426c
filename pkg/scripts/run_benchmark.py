"""Runtime grid over EV counts and horizons for the four solution modes.

    python scripts/run_benchmark.py --out results/bench [--ev-counts 48,96,144] [--horizons 6,12,18]

Writes ``bench.csv`` and ``bench.json`` (with per-mode heatmaps) and prints
the decomposed/monolithic and taylor/integer time ratios per cell.
"""

from __future__ import annotations

import argparse
import logging
import math
from pathlib import Path

from evflex import bench


def ints(text):
    return [int(x) for x in text.split(",") if x]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/bench"))
    ap.add_argument("--ev-counts", type=ints, default=list(bench.DEFAULT_EV_COUNTS))
    ap.add_argument("--horizons", type=ints, default=list(bench.DEFAULT_HORIZONS))
    ap.add_argument("--modes", type=lambda t: t.split(","), default=list(bench.MODES))
    ap.add_argument("--repetitions", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--time-limit", type=float, default=bench.DEFAULT_TIME_LIMIT)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(r):
        logging.info("%4d EVs x %2d steps  %-20s %8.2f s  %s", r["n_ev"], r["horizon"], r["mode"],
                     r["median_time_s"], r["status"])

    grid = bench.run_benchmark(args.ev_counts, args.horizons, args.modes, args.repetitions, args.seed,
                               time_limit=args.time_limit, progress=progress)
    grid.to_csv(args.out / "bench.csv")
    grid.to_json(args.out / "bench.json")
    for n in grid.ev_counts:
        for h in grid.horizons:
            t = {m: grid.cell(n, h, m)["median_time_s"] for m in grid.modes}
            ratio = lambda a, b: t[a] / t[b] if a in t and b in t and t[b] > 0 else math.nan
            print(f"{n:4d} x {h:2d}: decomposed/monolithic {ratio('decomposed-integer', 'monolithic-integer'):7.3f}"
                  f"  taylor/integer {ratio('decomposed-taylor', 'decomposed-integer'):7.3f}")


if __name__ == "__main__":
    main()
