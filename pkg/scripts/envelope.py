"""Hourly flexibility envelope of a generated one-day fleet.

    python scripts/envelope.py --out results/envelope [--stations 3 --vehicles-per-station 4]

Writes ``envelope.csv`` (one row per hour, price and direction) and the
baseline schedule summary in ``envelope.json``.
"""

from __future__ import annotations

import argparse
import logging
from datetime import datetime
from pathlib import Path

from evflex import flex
from evflex.scenario import make_scenario


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/envelope"))
    ap.add_argument("--stations", type=int, default=3)
    ap.add_argument("--vehicles-per-station", type=int, default=4)
    ap.add_argument("--dt", type=float, default=1.0, help="step length in hours")
    ap.add_argument("--hours", type=lambda t: [int(x) for x in t.split(",")], default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    T = int(round(24 / args.dt))
    sc = make_scenario(args.stations, args.vehicles_per_station, T, dt_h=args.dt, seed=args.seed,
                       pv_kw_per_charger=5.0, start=datetime(2024, 3, 1, 0))
    env = flex.compute_envelope(sc, hours=args.hours, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    env.to_csv(args.out / "envelope.csv")
    env.to_json(args.out / "envelope.json")
    for h in env.hours:
        up = env.series(h, "up")[1].max()
        down = env.series(h, "down")[1].max()
        print(f"hour {h:2d}: up {up:.4f} MW  down {down:.4f} MW")


if __name__ == "__main__":
    main()
