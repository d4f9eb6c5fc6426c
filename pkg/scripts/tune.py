"""Random search over the relaxation parameters rho_b, gamma_b and alpha_b.

    python scripts/tune.py [--ev 144 --horizon 18] [--trials 20] [--mode taylor]

Trials run on a benchmark grid instance; they are ranked by convergence,
then J_c gap to the decomposed integer solution, then iteration count.
"""

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path

from evflex import admm, bench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ev", type=int, default=144)
    ap.add_argument("--horizon", type=int, default=18)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--mode", choices=("taylor", "wang"), default="taylor")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-reference", action="store_true", help="skip the integer reference solve")
    ap.add_argument("--out", type=Path, default=Path("results/tune.csv"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sc, oc = bench.bench_instance(args.ev, args.horizon, args.seed)
    ref = None
    if not args.no_reference:
        sched, rec = admm.run(sc, oc, admm.mode_options("integer"))
        ref = sched.meta["jc"]
        logging.info("integer reference J_c = %.8f (%s, %d iterations)", ref, rec.status, rec.k)
    trials = bench.tune(sc, oc, args.mode, args.trials, args.seed, reference_jc=ref)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, list(trials[0]))
        w.writeheader()
        w.writerows(trials)
    for t in trials:
        print(f"rho_b={t['rho_b']:9.3f} gamma_b={t['gamma_b']:10.1f} alpha_b={t['alpha_b']:.3f} "
              f"{t['status']:8s} k={t['iterations']:4d} gap={t['gap']:.2e} {t['time_s']:.1f}s")


if __name__ == "__main__":
    main()
