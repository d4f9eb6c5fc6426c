"""Benchmark harness, random oracle instances and the relaxation tuner."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from . import admm
from .admm import AdmmParams
from .monolithic import FormulationOptions, solve_monolithic
from .objectives import ObjectiveConfig, ObjectiveSpec
from .scenario import make_scenario

log = logging.getLogger(__name__)

MODES = ("monolithic-integer", "decomposed-integer", "decomposed-taylor", "decomposed-wang")
BENCH_COLUMNS = ["n_ev", "horizon", "mode", "median_time_s", "objective", "gap_vs_integer", "status"]
DEFAULT_EV_COUNTS = (48, 96, 144)
DEFAULT_HORIZONS = (6, 12, 18)
VEHICLES_PER_STATION = 8
# per-mode wall-clock cap; a capped run records status "timeout" and the cap as its time
DEFAULT_TIME_LIMIT = 300.0


def random_instance(seed: int, n_ev: int | None = None, T: int | None = None, n_stations: int = 2):
    """Small strictly-stationary instance with station energy costs and fleet tracking.

    Vehicle count, horizon, start hour and tariff are drawn from ``seed``
    unless given; the tracking reference is uniform in [-5, 15] kW.

    Returns
    -------
    (Scenario, ObjectiveConfig)
    """
    rng = np.random.default_rng(1000 + seed)
    vps = max(1, n_ev // n_stations) if n_ev else int(rng.integers(1, 3))
    T = T or int(rng.choice([8, 12]))
    hour = int(rng.choice([0, 6, 8, 12, 17]))
    tariff = str(rng.choice(["flat", "tou"]))
    sc = make_scenario(n_stations, vps, T, seed=seed, pv_kw_per_charger=5.0, pv_probability=0.5,
                       start=datetime(2024, 3, 1, hour), tariff=tariff)
    ref = rng.uniform(-5.0, 15.0, T)
    oc = ObjectiveConfig([ObjectiveSpec("energy_cost")], [ObjectiveSpec("track_profile", weight=0.01, reference=ref)])
    return sc, oc


def bench_instance(n_ev: int, T: int, seed: int = 0, vehicles_per_station: int = VEHICLES_PER_STATION):
    """Grid cell instance: stations of ``vehicles_per_station`` EVs tracking a flat fleet profile."""
    n_s = max(1, n_ev // vehicles_per_station)
    sc = make_scenario(n_s, vehicles_per_station, T, seed=seed, pv_kw_per_charger=5.0, pv_probability=0.5,
                       start=datetime(2024, 3, 1, 8))
    ref = np.full(T, 2.0 * n_s * vehicles_per_station)
    oc = ObjectiveConfig([ObjectiveSpec("energy_cost")], [ObjectiveSpec("track_profile", weight=0.01, reference=ref)])
    return sc, oc


class _Timeout(Exception):
    pass


def solve_mode(mode: str, scenario, objectives, params: AdmmParams | None = None, time_limit: float | None = None,
               base: FormulationOptions | None = None):
    """Run one benchmark mode; returns ``(FleetSchedule, J_c, status)``."""
    params = params or AdmmParams()
    t0 = time.perf_counter()
    if mode == "monolithic-integer":
        sched = solve_monolithic(scenario, objectives, admm.mode_options("integer", base), time_limit=time_limit)
        status = sched.status
        if status == "max_iter" and time_limit is not None and time.perf_counter() - t0 >= time_limit:
            status = "timeout"
        return sched, sched.costs["total"], status
    if not mode.startswith("decomposed-"):
        raise ValueError(f"mode must be one of {MODES}")

    def guard(rec):
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            raise _Timeout

    sched, rec = admm.run(scenario, objectives, admm.mode_options(mode.split("-", 1)[1], base), params,
                          callback=guard)
    return sched, sched.meta["jc"], rec.status


@dataclass
class BenchmarkGrid:
    ev_counts: list
    horizons: list
    modes: list
    rows: list = field(default_factory=list)

    def cell(self, n_ev, horizon, mode) -> dict:
        for r in self.rows:
            if r["n_ev"] == n_ev and r["horizon"] == horizon and r["mode"] == mode:
                return r
        raise KeyError((n_ev, horizon, mode))

    def heatmap(self, mode: str) -> list:
        """Median times as an ``ev_counts x horizons`` nested list."""
        return [[self.cell(n, h, mode)["median_time_s"] for h in self.horizons] for n in self.ev_counts]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, BENCH_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def to_dict(self) -> dict:
        return {"ev_counts": list(self.ev_counts), "horizons": list(self.horizons), "modes": list(self.modes),
                "rows": self.rows, "heatmaps": {m: self.heatmap(m) for m in self.modes}}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def run_benchmark(ev_counts=DEFAULT_EV_COUNTS, horizons=DEFAULT_HORIZONS, modes=MODES, repetitions: int = 1,
                  seed: int = 0, params: AdmmParams | None = None, time_limit: float | None = DEFAULT_TIME_LIMIT,
                  max_binaries: int | None = None, progress=None) -> BenchmarkGrid:
    """Median wall time and J_c per (EV count, horizon, mode) cell.

    ``gap_vs_integer`` compares each mode's J_c with the monolithic integer
    result when it is available and optimal, else with the decomposed
    integer result. Integer modes are skipped for cells whose binary count
    exceeds ``max_binaries``.
    """
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown benchmark mode {m!r}")
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    grid = BenchmarkGrid(list(ev_counts), list(horizons), list(modes))
    for n_ev in ev_counts:
        for T in horizons:
            sc, oc = bench_instance(n_ev, T, seed)
            n_bin = int(sum(np.sum(sc.timeline.l[:, v]) for v in range(len(sc.fleet))))
            cell = {}
            for mode in modes:
                if "integer" in mode and max_binaries is not None and n_bin > max_binaries:
                    cell[mode] = {"n_ev": n_ev, "horizon": T, "mode": mode, "median_time_s": float("nan"),
                                  "objective": float("nan"), "status": "skipped", "times": []}
                    continue
                times, objs, status = [], [], "optimal"
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    try:
                        _, jc, st = solve_mode(mode, sc, oc, params, time_limit)
                    except _Timeout:
                        jc, st = float("nan"), "timeout"
                    except Exception as exc:  # recorded in the grid, the sweep goes on
                        log.warning("benchmark cell %s/%s/%s failed: %s", n_ev, T, mode, exc)
                        jc, st = float("nan"), "error"
                    times.append(time.perf_counter() - t0)
                    objs.append(jc)
                    if st != "optimal":
                        status = st
                cell[mode] = {"n_ev": n_ev, "horizon": T, "mode": mode, "median_time_s": statistics.median(times),
                              "objective": objs[0], "status": status, "times": times, "objectives": objs,
                              "n_binaries": n_bin}
                if progress is not None:
                    progress(cell[mode])
            ref = None
            for m in ("monolithic-integer", "decomposed-integer"):
                if m in cell and cell[m]["status"] == "optimal" and np.isfinite(cell[m]["objective"]):
                    ref = cell[m]["objective"]
                    break
            for mode in modes:
                r = cell[mode]
                r["gap_vs_integer"] = (r["objective"] - ref) / max(abs(ref), 1e-12) if ref is not None else float("nan")
                grid.rows.append(r)
    return grid


# -- tuning -------------------------------------------------------------------------

def tune(scenario, objectives, mode: str = "taylor", n_trials: int = 20, seed: int = 0,
         base_params: AdmmParams | None = None, reference_jc: float | None = None) -> list:
    """Random search over the relaxation parameters.

    ``rho_b`` is log-uniform in [0.1, 1000], ``gamma_b`` log-uniform in
    [10, 1e5] and ``alpha_b`` uniform in [0.5, 1] (Taylor only).

    Trials are ranked by converged status, then J_c gap to ``reference_jc``
    (when given), then iteration count.
    """
    base = base_params or AdmmParams()
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        p = replace(base, rho_b=float(10 ** rng.uniform(-1, 3)), gamma_b=float(10 ** rng.uniform(1, 5)),
                    alpha_b=float(rng.uniform(0.5, 1.0)) if mode == "taylor" else 1.0)
        t0 = time.perf_counter()
        try:
            sched, rec = admm.run(scenario, objectives, admm.mode_options(mode), p)
            jc, status, k = sched.meta["jc"], rec.status, rec.k
        except Exception as exc:  # a diverging trial is a data point, not a failure of the search
            log.warning("tuning trial %d failed: %s", i, exc)
            jc, status, k = float("nan"), "error", p.max_iter
        gap = abs(jc - reference_jc) / max(abs(reference_jc), 1e-12) if reference_jc is not None else 0.0
        trials.append({"trial": i, "rho_b": p.rho_b, "gamma_b": p.gamma_b, "alpha_b": p.alpha_b, "jc": jc,
                       "gap": gap, "iterations": k, "status": status, "time_s": time.perf_counter() - t0})
    trials.sort(key=lambda t: (t["status"] != "optimal", not np.isfinite(t["gap"]), t["gap"] > 1e-3,
                               t["iterations"], t["gap"]))
    return trials
