"""Command-line entry points.

Exit codes: 0 success, 1 solver failure, 2 invalid input. Errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime
from importlib import resources
from pathlib import Path

import numpy as np

from . import admm, bench, flex
from .admm import AdmmParams
from .config import params_from_file
from .monolithic import FormulationOptions, solve_monolithic
from .scenario import Scenario, make_scenario

log = logging.getLogger("evflex")

SOLVE_MODES = ("monolithic", "monolithic-mono", "admm-integer", "admm-taylor", "admm-wang", "admm-continuous",
               "admm-mono")


class InputError(Exception):
    pass


class SolverFailure(Exception):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("invalid_input", message)
        sys.exit(2)


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")


def _csv_floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def toy_scenario_path() -> Path:
    return Path(str(resources.files("evflex") / "data" / "toy_scenario.json"))


def load_scenario(arg: str) -> Scenario:
    path = toy_scenario_path() if arg == "toy" else Path(arg)
    try:
        return Scenario.load(path)
    except FileNotFoundError as exc:
        raise InputError(f"scenario file not found: {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read scenario {path}: {exc}") from exc


def _params(args, default: AdmmParams | None = None) -> AdmmParams:
    try:
        p = params_from_file(args.params) if args.params else (default or AdmmParams())
    except FileNotFoundError as exc:
        raise InputError(f"parameter file not found: {args.params}") from exc
    except (ValueError, TypeError) as exc:
        raise InputError(str(exc)) from exc
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        start = datetime.fromisoformat(args.start)
    except ValueError as exc:
        raise InputError(f"bad --start: {exc}") from exc
    try:
        sc = make_scenario(args.stations, args.vehicles_per_station, args.horizon, dt_h=args.dt, seed=args.seed,
                           pv_kw_per_charger=args.pv_kw, pv_probability=args.pv_probability, start=start,
                           tariff=args.tariff)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    path = _out_dir(args) / args.name
    sc.save(path)
    print(str(path))
    return 0


def _schedule_payload(sched) -> dict:
    d = sched.summary()
    d.update({"u_c": sched.u_c.tolist(), "u_d": sched.u_d.tolist(), "soc": sched.soc.tolist()})
    return d


def cmd_solve(args) -> int:
    sc = load_scenario(args.scenario)
    params = _params(args)
    params = replace(params, workers=args.threads)
    out = _out_dir(args)
    rec = None
    if args.mode.startswith("monolithic"):
        opts = FormulationOptions(bidirectional=args.mode == "monolithic")
        sched = solve_monolithic(sc, opts=opts, time_limit=args.time_limit)
    else:
        mode = args.mode.split("-", 1)[1]
        try:
            sched, rec = admm.run(sc, sc.objectives, admm.mode_options(mode), params)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        rec.to_json(out / "run.json")
    if args.format == "csv":
        sched.to_csv(out / "schedule.csv")
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(sched.summary(), fh, indent=1)
            fh.write("\n")
    else:
        with open(out / "schedule.json", "w", encoding="utf-8") as fh:
            json.dump(_schedule_payload(sched), fh, indent=1)
            fh.write("\n")
    status = sched.status if rec is None else rec.status
    print(json.dumps({"status": status, "objective": sched.costs["total"], "jc": sched.meta.get("jc"),
                      "iterations": None if rec is None else rec.k}))
    if status != "optimal":
        raise SolverFailure(f"solver stopped with status {status}", status)
    return 0


def cmd_envelope(args) -> int:
    sc = load_scenario(args.scenario)
    params = replace(_params(args, flex.ENVELOPE_PARAMS), workers=1)
    out = _out_dir(args)
    try:
        env = flex.compute_envelope(sc, prices=args.prices, hours=args.hours, directions=args.directions,
                                    params=params, mode=args.mode, workers=args.threads,
                                    record_dir=out / "records" if args.records else None)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.format == "csv":
        env.to_csv(out / "envelope.csv")
    else:
        env.to_json(out / "envelope.json")
    failed = [c for c in env.cells if c.status.startswith("error")]
    print(json.dumps({"cells": len(env.cells), "failed": len(failed)}))
    return 0


def cmd_bench(args) -> int:
    params = replace(_params(args), workers=args.threads)
    out = _out_dir(args)

    def progress(row):
        log.info("%s EVs x %s steps %s: %.2f s (%s)", row["n_ev"], row["horizon"], row["mode"],
                 row["median_time_s"], row["status"])

    grid = bench.run_benchmark(args.ev_counts, args.horizons, args.modes, args.repetitions, args.seed, params,
                               args.time_limit, args.max_binaries, progress)
    if args.format == "csv":
        grid.to_csv(out / "bench.csv")
    grid.to_json(out / "bench.json")
    print(json.dumps({"cells": len(grid.rows)}))
    return 0


def cmd_tune(args) -> int:
    sc = load_scenario(args.scenario)
    params = replace(_params(args), workers=args.threads)
    ref = None
    if args.reference:
        ref = solve_monolithic(sc).costs["total"]
    trials = bench.tune(sc, sc.objectives, args.mode, args.trials, args.seed, params, ref)
    out = _out_dir(args)
    if args.format == "csv":
        import csv
        with open(out / "tune.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, list(trials[0]))
            w.writeheader()
            w.writerows(trials)
    else:
        with open(out / "tune.json", "w", encoding="utf-8") as fh:
            json.dump(trials, fh, indent=1)
            fh.write("\n")
    best = trials[0]
    print(json.dumps({k: best[k] for k in ("rho_b", "gamma_b", "alpha_b", "iterations", "status")}))
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--params", default=None, help="flat key = value parameter file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="evflex", description="EV fleet charge/discharge scheduling")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="synthesize a scenario (JSON)")
    g.add_argument("--stations", type=int, default=2)
    g.add_argument("--vehicles-per-station", type=int, default=2)
    g.add_argument("--horizon", type=int, default=12, help="number of steps")
    g.add_argument("--dt", type=float, default=0.25, help="step length in hours")
    g.add_argument("--start", default="2024-03-01T08:00")
    g.add_argument("--tariff", choices=("flat", "tou"), default="flat")
    g.add_argument("--pv-kw", type=float, default=0.0, help="PV peak per charger (kW)")
    g.add_argument("--pv-probability", type=float, default=0.5)
    g.add_argument("--name", default="scenario.json")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", parents=[common], help="solve a scenario")
    s.add_argument("scenario", help="scenario JSON path, or 'toy' for the bundled example")
    s.add_argument("--mode", choices=SOLVE_MODES, default="admm-taylor")
    s.add_argument("--time-limit", type=float, default=None)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("envelope", parents=[common], help="hourly flexibility envelope")
    e.add_argument("scenario")
    e.add_argument("--prices", type=_csv_floats, default=list(flex.DEFAULT_PRICES), help="currency/MWh, comma list")
    e.add_argument("--hours", type=_csv_ints, default=None)
    e.add_argument("--directions", type=lambda t: [x for x in t.split(",") if x], default=list(flex.DIRECTIONS))
    e.add_argument("--mode", choices=("integer", "taylor", "wang", "continuous", "mono"), default="taylor")
    e.add_argument("--records", action="store_true", help="write one run record per cell")
    e.set_defaults(func=cmd_envelope)

    b = sub.add_parser("bench", parents=[common], help="runtime benchmark grid")
    b.add_argument("--ev-counts", type=_csv_ints, default=list(bench.DEFAULT_EV_COUNTS))
    b.add_argument("--horizons", type=_csv_ints, default=list(bench.DEFAULT_HORIZONS))
    b.add_argument("--modes", type=lambda t: [x for x in t.split(",") if x], default=list(bench.MODES))
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--time-limit", type=float, default=600.0)
    b.add_argument("--max-binaries", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("tune", parents=[common], help="random search over relaxation parameters")
    t.add_argument("scenario")
    t.add_argument("--mode", choices=("taylor", "wang"), default="taylor")
    t.add_argument("--trials", type=int, default=20)
    t.add_argument("--reference", action="store_true", help="rank by J_c gap to the monolithic optimum")
    t.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        _emit_error("invalid_input", "--threads must be at least 1")
        return 2
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except InputError as exc:
        _emit_error("invalid_input", str(exc))
        return 2
    except SolverFailure as exc:
        _emit_error("solver_failure", str(exc), status=exc.status)
        return 1
    except (RuntimeError, ArithmeticError) as exc:
        _emit_error("solver_failure", str(exc))
        return 1
    except ValueError as exc:
        _emit_error("invalid_input", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
