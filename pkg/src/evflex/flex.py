"""Hourly flexibility envelopes.

For every (hour, price, direction) cell the fleet is asked to deviate from
its cost-optimal baseline during the steps of that hour, paid through the
linear flexibility term ``p_f * sum |r - P| dt``. The requested deviation is
the whole fleet power capacity, which no schedule can reach, so the achieved
deviation measures the largest response the fleet finds worth its cost.

Directions: ``up`` asks for lower consumption (``r = base - D``), ``down`` for
higher consumption (``r = base + D``).
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import admm
from .admm import AdmmParams
from .monolithic import FormulationOptions
from .objectives import ObjectiveConfig, ObjectiveSpec
from .scenario import Scenario

log = logging.getLogger(__name__)

DEFAULT_PRICES = tuple(float(p) for p in np.linspace(10.0, 377.5, 10))
DIRECTIONS = ("up", "down")
# The flexibility payment is piecewise linear, so at rho = 1 the station updates
# creep along flat faces of the cost for hundreds of iterations. Weak coupling
# and matching damping let each cell meet the residual test in ~30-120 iterations.
ENVELOPE_PARAMS = AdmmParams(rho=0.01, gamma=0.01)
ENVELOPE_COLUMNS = ["hour", "price", "direction", "deviation_mw", "charge_cost", "soc_penalty", "track_revenue",
                    "total_cost", "status"]


@dataclass
class FlexCell:
    hour: int
    price: float
    direction: str
    deviation_mw: float
    charge_cost: float
    soc_penalty: float
    track_revenue: float
    total_cost: float
    status: str
    mean_deviation_mw: float = 0.0
    iterations: int = 0

    def row(self) -> list:
        return [self.hour, repr(self.price), self.direction, repr(self.deviation_mw), repr(self.charge_cost),
                repr(self.soc_penalty), repr(self.track_revenue), repr(self.total_cost), self.status]


@dataclass
class FlexEnvelope:
    cells: list
    baseline_kw: np.ndarray
    baseline_costs: dict
    capacity_kw: float
    meta: dict = field(default_factory=dict)

    def get(self, hour: int, price: float, direction: str) -> FlexCell:
        for c in self.cells:
            if c.hour == hour and c.direction == direction and np.isclose(c.price, price, rtol=0, atol=1e-12):
                return c
        raise KeyError((hour, price, direction))

    def series(self, hour: int, direction: str, attr: str = "deviation_mw") -> tuple:
        """``(prices, values)`` for one (hour, direction), prices ascending."""
        cs = sorted((c for c in self.cells if c.hour == hour and c.direction == direction), key=lambda c: c.price)
        return np.array([c.price for c in cs]), np.array([getattr(c, attr) for c in cs])

    @property
    def hours(self) -> list:
        return sorted({c.hour for c in self.cells})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(ENVELOPE_COLUMNS)
            for c in self.cells:
                w.writerow(c.row())

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "baseline_kw": self.baseline_kw.tolist(),
                "baseline_costs": self.baseline_costs, "capacity_kw": self.capacity_kw, "meta": self.meta}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def read_envelope_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(FlexCell(int(r["hour"]), float(r["price"]), r["direction"], float(r["deviation_mw"]),
                            float(r["charge_cost"]), float(r["soc_penalty"]), float(r["track_revenue"]),
                            float(r["total_cost"]), r["status"]))
    return out


def hour_steps(scenario: Scenario) -> dict:
    """Hour of day -> step indices, for hours the horizon covers completely."""
    tl = scenario.timeline
    hours = np.floor(tl.start_hour + np.arange(tl.T) * tl.dt_h + 1e-9).astype(int)
    per_hour = int(round(1.0 / tl.dt_h)) if tl.dt_h <= 1 else 1
    out = {}
    for h in np.unique(hours):
        steps = np.flatnonzero(hours == h)
        if steps.size >= per_hour:
            out[int(h % 24)] = steps
    return out


def fleet_capacity_kw(scenario: Scenario) -> float:
    return float(sum(v.max_charge_kw + v.max_discharge_kw for v in scenario.fleet))


def _station_only(objectives: ObjectiveConfig) -> ObjectiveConfig:
    return ObjectiveConfig(list(objectives.station), [], objectives.soc_weight)


def solve_cell(scenario, objectives, opts, params, baseline_kw, steps, price, direction, capacity_kw):
    """One envelope cell; returns ``(FleetSchedule, AdmmRun, flexibility spec or None)``."""
    if price == 0:
        # no incentive: the problem is the baseline problem
        sched, rec = admm.run(scenario, _station_only(objectives), opts, params)
        return sched, rec, None
    sign = -1.0 if direction == "up" else 1.0
    ref = baseline_kw + sign * capacity_kw
    spec = ObjectiveSpec("flex_linear", reference=ref, flex_price=price, steps=tuple(int(s) for s in steps))
    sched, rec = admm.run(scenario, ObjectiveConfig(list(objectives.station), [spec], objectives.soc_weight),
                          opts, params)
    return sched, rec, spec


def cell_from_schedule(hour, price, direction, sched, rec, baseline_kw, steps, capacity_kw, dt_h) -> FlexCell:
    P = sched.fleet_power
    sign = -1.0 if direction == "up" else 1.0
    dev = sign * (P[steps] - baseline_kw[steps])
    ref = baseline_kw + sign * capacity_kw
    charge = float(sum(sched.costs["station"]))
    pen = float(sched.costs["soc_penalty"])
    # revenue: how much the flexibility penalty dropped relative to staying on the baseline
    k = price * dt_h / 1000.0
    base_pen = k * float(np.sum(np.abs(ref[steps] - baseline_kw[steps])))
    flex_pen = float(sched.costs["system"]) if price else base_pen
    revenue = base_pen - flex_pen
    total = float(sched.costs["total"]) - base_pen if price else charge + pen
    status = rec.status if sched.status == rec.status else sched.status
    return FlexCell(int(hour), float(price), direction, max(0.0, float(np.max(dev, initial=0.0))) / 1000.0,
                    charge, pen, revenue, total, status, max(0.0, float(np.mean(dev))) / 1000.0, rec.k)


def compute_envelope(scenario: Scenario, prices=DEFAULT_PRICES, hours=None, directions=DIRECTIONS,
                     params: AdmmParams | None = None, mode: str = "taylor", objectives: ObjectiveConfig | None = None,
                     workers: int = 1, record_dir=None, base_opts: FormulationOptions | None = None) -> FlexEnvelope:
    """Sweep (hour, price, direction) cells around the cost-optimal baseline.

    Parameters
    ----------
    prices : sequence of float
        Flexibility prices in currency/MWh.
    hours : sequence of int, optional
        Hours of day; defaults to every hour the horizon fully covers.
    params : AdmmParams, optional
        Decomposition parameters; defaults to ``ENVELOPE_PARAMS``.
    workers : int
        Cells run on a pool of this many threads; results do not depend on it.
    record_dir : path, optional
        Directory for one ADMM run record (JSON) per cell.
    """
    objectives = objectives or scenario.objectives
    params = params or ENVELOPE_PARAMS
    opts = admm.mode_options(mode, base_opts)
    steps_of = hour_steps(scenario)
    hours = sorted(steps_of) if hours is None else [int(h) for h in hours]
    missing = [h for h in hours if h not in steps_of]
    if missing:
        raise ValueError(f"hours {missing} are not fully covered by the horizon")
    for d in directions:
        if d not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
    if any(p < 0 for p in prices):
        raise ValueError("flexibility prices must be non-negative")
    cap = fleet_capacity_kw(scenario)
    base_sched, base_rec = admm.run(scenario, _station_only(objectives), opts, params)
    baseline = base_sched.fleet_power.copy()
    if record_dir is not None:
        Path(record_dir).mkdir(parents=True, exist_ok=True)
        base_rec.to_json(Path(record_dir) / "baseline.json")

    jobs = [(h, float(p), d) for h in hours for d in directions for p in prices]

    def job(args):
        h, p, d = args
        try:
            sched, rec, _ = solve_cell(scenario, objectives, opts, params, baseline, steps_of[h], p, d, cap)
        except Exception as exc:  # a failed cell is reported, never fatal for the sweep
            log.warning("envelope cell %s failed: %s", args, exc)
            nan = float("nan")
            return FlexCell(h, p, d, nan, nan, nan, nan, nan, f"error: {exc}"), None
        if record_dir is not None:
            rec.to_json(Path(record_dir) / f"cell_h{h:02d}_{d}_p{p:g}.json")
        return cell_from_schedule(h, p, d, sched, rec, baseline, steps_of[h], cap, scenario.dt_h), rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    cells = [c for c, _ in results]
    return FlexEnvelope(cells, baseline, base_sched.costs, cap,
                        {"mode": mode, "params": params.to_dict(), "hours": hours, "prices": list(prices),
                         "baseline_status": base_rec.status, "baseline_iterations": base_rec.k})
