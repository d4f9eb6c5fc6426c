"""Full-fleet problem assembly, solution extraction and schedule I/O.

Variable layout (deterministic): for every vehicle in fleet order the
blocks ``u_c (T)``, ``u_d (T)`` (bidirectional only) and ``x (T+1)``; after
all vehicles come the auxiliaries: per vehicle the charge-direction binaries
``x_c``, connection binaries ``c`` and SOC slacks; per station the net power
``p_s (T)`` and objective epigraph variables; last the fleet aggregate
``P = sum_s p_s`` and fleet-level objective variables.

The SOC floor ``x_min`` is soft like the departure requirements, so trip
losses and self-discharge can never make the problem infeasible; only
``x <= x_max`` and ``x_0 = x_start`` are hard.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives as obj
from .dynamics import discretize, simulate
from .objectives import ObjectiveConfig, ObjectiveSpec
from .qp import BranchAndBound, QpBuilder, QpProblem, QpSolution, SolverSettings, SplittingSolver
from .scenario import Scenario

log = logging.getLogger(__name__)

BILINEAR_MODES = ("integer", "taylor", "wang", "none")


@dataclass(frozen=True)
class FormulationOptions:
    strictly_stationary: bool = True
    stations_not_downsized: bool = True
    bidirectional: bool = True
    bilinear_mode: str = "integer"
    # terminal SOC floor as a fraction of capacity; None adds nothing beyond the comfort floor
    terminal_floor_frac: float | None = None

    def __post_init__(self):
        if self.bilinear_mode not in BILINEAR_MODES:
            raise ValueError(f"bilinear_mode must be one of {BILINEAR_MODES}")
        if self.stations_not_downsized and not self.strictly_stationary:
            raise ValueError("stations_not_downsized requires strictly_stationary")
        if self.bilinear_mode in ("taylor", "wang") and not self.bidirectional:
            raise ValueError(f"{self.bilinear_mode} relaxation needs bidirectional charging")

    @property
    def integer(self) -> bool:
        return self.bidirectional and self.bilinear_mode == "integer"


@dataclass
class VehicleBlock:
    uc: np.ndarray
    ud: np.ndarray | None
    x: np.ndarray
    slack: np.ndarray
    thresholds: np.ndarray
    xc: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    xc_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    c: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    c_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class Layout:
    T: int
    vehicles: list
    station_p: list
    station_y: list
    agg: np.ndarray | None
    soc_offset: float = 0.0

    def controls(self) -> np.ndarray:
        """Indices of all control variables, vehicle by vehicle ``[u_c, u_d]``."""
        parts = []
        for vb in self.vehicles:
            parts.append(vb.uc)
            if vb.ud is not None:
                parts.append(vb.ud)
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)


def soc_thresholds(vehicle, e_col, terminal_floor_frac=None) -> np.ndarray:
    """Soft lower threshold on ``x_0 .. x_T``: the comfort floor, raised to ``e`` at departures."""
    T = len(e_col)
    th = np.full(T + 1, vehicle.floor_kwh)
    th[1:T] = np.maximum(th[1:T], np.asarray(e_col, dtype=float)[1:])
    if terminal_floor_frac is not None:
        th[T] = max(th[T], terminal_floor_frac * vehicle.capacity_kwh)
    return th


def _membership(scenario: Scenario, opts: FormulationOptions) -> np.ndarray:
    if opts.strictly_stationary:
        if not scenario.strictly_stationary:
            raise ValueError("strictly_stationary formulation on a timeline where vehicles change station")
        home = scenario.home_index()
        return np.where(scenario.timeline.l == 1, home[None, :], -1)
    return scenario.station_matrix()


def assemble(scenario: Scenario, objectives: ObjectiveConfig | None = None,
             opts: FormulationOptions | None = None, hook=None) -> tuple:
    """Build the fleet QP/MIQP.

    Parameters
    ----------
    scenario : Scenario
    objectives : ObjectiveConfig, optional
        Defaults to ``scenario.objectives``.
    opts : FormulationOptions, optional
    hook : callable, optional
        ``hook(builder, layout)`` runs just before the problem is built, for
        callers that need extra rows or terms on the documented variables.

    Returns
    -------
    (QpProblem, Layout)
    """
    objectives = objectives or scenario.objectives
    opts = opts or FormulationOptions()
    tl = scenario.timeline
    T, dt = tl.T, tl.dt_h
    fleet, stations = scenario.fleet, scenario.stations
    n_s = len(stations)
    member = _membership(scenario, opts)
    l = tl.l.astype(float)
    e = tl.e_dense()
    de = tl.delta_e_dense()
    if np.any(e.sum(axis=0) > 0) and np.any(l.sum(axis=0) == 0):
        warnings.warn("a vehicle with trip requirements is never at a station", stacklevel=2)

    b = QpBuilder()
    blocks = []
    for v, veh in enumerate(fleet):
        uc = b.add_var(f"uc[{veh.id}]", T, lb=0.0, ub=l[:, v] * veh.max_charge_kw)
        ud = None
        if opts.bidirectional:
            ud = b.add_var(f"ud[{veh.id}]", T, lb=0.0, ub=l[:, v] * veh.max_discharge_kw)
        xlb = np.full(T + 1, -np.inf)
        xub = np.full(T + 1, veh.capacity_kwh)
        xlb[0] = xub[0] = veh.initial_soc_kwh
        x = b.add_var(f"x[{veh.id}]", T + 1, lb=xlb, ub=xub)
        blocks.append(VehicleBlock(uc, ud, x, np.zeros(0, dtype=int),
                                   soc_thresholds(veh, e[:, v], opts.terminal_floor_frac)))

    # which stations need connection binaries: only where the charger count can bind
    need_c = np.zeros(n_s, dtype=bool)
    if not opts.stations_not_downsized:
        for s, st in enumerate(stations):
            need_c[s] = np.max((member == s).sum(axis=1), initial=0) > st.n_max_chargers

    soc_offset = 0.0
    for v, veh in enumerate(fleet):
        vb = blocks[v]
        dyn = discretize(veh, dt)
        r = np.arange(T)
        # x[t+1] - a x[t] - b_ch uc[t] + b_ds ud[t] = -delta_e[t]
        rows = [r, r, r]
        cols = [vb.x[1:], vb.x[:-1], vb.uc]
        vals = [np.ones(T), np.full(T, -dyn.a), np.full(T, -dyn.b_ch)]
        if vb.ud is not None:
            rows.append(r)
            cols.append(vb.ud)
            vals.append(np.full(T, dyn.b_ds))
        b.add_rows(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), -de[:, v], -de[:, v])

        present = np.flatnonzero(l[:, v] > 0)
        if opts.integer and veh.max_charge_kw > 0 and veh.max_discharge_kw > 0 and present.size:
            k = present.size
            vb.xc = b.add_var(f"xc[{veh.id}]", k, binary=True)
            vb.xc_steps = present
            rr = np.arange(k)
            # uc <= ucmax xc ; ud <= udmax (1 - xc)
            b.add_rows(np.r_[rr, rr], np.r_[vb.uc[present], vb.xc],
                       np.r_[np.ones(k), np.full(k, -veh.max_charge_kw)], -np.inf, 0.0)
            b.add_rows(np.r_[rr, rr], np.r_[vb.ud[present], vb.xc],
                       np.r_[np.ones(k), np.full(k, veh.max_discharge_kw)], -np.inf, veh.max_discharge_kw)
        if need_c.any():
            csteps = present[need_c[member[present, v]]]
            if csteps.size:
                k = csteps.size
                vb.c = b.add_var(f"c[{veh.id}]", k, binary=True)
                vb.c_steps = csteps
                rr = np.arange(k)
                b.add_rows(np.r_[rr, rr], np.r_[vb.uc[csteps], vb.c],
                           np.r_[np.ones(k), np.full(k, -veh.max_charge_kw)], -np.inf, 0.0)
                if vb.ud is not None:
                    b.add_rows(np.r_[rr, rr], np.r_[vb.ud[csteps], vb.c],
                               np.r_[np.ones(k), np.full(k, -veh.max_discharge_kw)], -np.inf, 0.0)

        th = vb.thresholds
        vb.slack = obj.build_soft_soc_penalty(b, vb.x[1:], th[1:], objectives.soc_weight, name=f"s[{veh.id}]")
        soc_offset += objectives.soc_weight * max(th[0] - veh.initial_soc_kwh, 0.0) ** 2
    b.offset += soc_offset

    # station net power: p_s - sum_{v at s} (uc - ud) = base - pv
    station_p = []
    for s, st in enumerate(stations):
        station_p.append(b.add_var(f"p[{st.id}]", T, lb=st.p_lower_kw, ub=st.p_max_kw))
    rows, cols, vals = [], [], []
    for s in range(n_s):
        rows.append(s * T + np.arange(T))
        cols.append(station_p[s])
        vals.append(np.ones(T))
    for v, vb in enumerate(blocks):
        t = np.flatnonzero(member[:, v] >= 0)
        rows.append(member[t, v] * T + t)
        cols.append(vb.uc[t])
        vals.append(-np.ones(t.size))
        if vb.ud is not None:
            rows.append(member[t, v] * T + t)
            cols.append(vb.ud[t])
            vals.append(np.ones(t.size))
    net = np.concatenate([st.net_load_kw for st in stations]) if n_s else np.zeros(0)
    if n_s:
        b.add_rows(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), net, net)

    # charger count: sum_{v at s} c[v, t] <= n_max
    if need_c.any():
        rows, cols = [], []
        for v, vb in enumerate(blocks):
            if vb.c.size:
                rows.append(member[vb.c_steps, v] * T + vb.c_steps)
                cols.append(vb.c)
        rows = np.concatenate(rows)
        hi = np.repeat([st.n_max_chargers for st in stations], T).astype(float)
        b.add_rows(rows, np.concatenate(cols), np.ones(rows.size), -np.inf, hi)

    station_y = []
    for s, st in enumerate(stations):
        n_before = set(b.names)
        obj.build_station_objectives(b, objectives.station, station_p[s], st, dt, tag=st.id)
        ys = [b.names[k] for k in b.names if k not in n_before and k.startswith("y[")]
        station_y.append(np.concatenate(ys) if ys else np.zeros(0, dtype=int))

    agg = None
    if objectives.active_system:
        agg = b.add_var("P", T)
        rr = np.arange(T)
        b.add_rows(np.concatenate([rr] + [rr] * n_s), np.concatenate([agg] + station_p),
                   np.r_[np.ones(T), -np.ones(T * n_s)], 0.0, 0.0)
        obj.build_system_objectives(b, objectives.active_system, agg, dt)

    layout = Layout(T, blocks, station_p, station_y, agg, soc_offset)
    if hook is not None:
        hook(b, layout)
    return b.build(), layout


# -- schedules -------------------------------------------------------------------------

@dataclass
class FleetSchedule:
    """Per-vehicle controls and SOC, station power and a cost breakdown.

    ``soc`` has ``T + 1`` rows: the state at the start of every step plus the
    terminal state.
    """

    dt_h: float
    vehicle_ids: list
    station_ids: list
    u_c: np.ndarray
    u_d: np.ndarray
    soc: np.ndarray
    station_power: np.ndarray
    costs: dict = field(default_factory=dict)
    status: str = "optimal"
    objective: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.u_c.shape[0]

    @property
    def fleet_power(self) -> np.ndarray:
        return self.station_power.sum(axis=1)

    def controls(self) -> np.ndarray:
        """``[u_c; u_d]`` per vehicle, the vector the damping and J_c metrics act on."""
        return np.concatenate([np.r_[self.u_c[:, v], self.u_d[:, v]] for v in range(self.u_c.shape[1])]) \
            if self.u_c.size else np.zeros(0)

    def complementarity(self) -> float:
        return float(np.max(self.u_c * self.u_d, initial=0.0))

    def to_csv(self, path) -> None:
        """Long format ``time,vehicle,u_c,u_d,soc``; ``soc`` is the state at the end of the step."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "vehicle", "u_c", "u_d", "soc"])
            for t in range(self.T):
                for v, vid in enumerate(self.vehicle_ids):
                    w.writerow([t, vid, repr(float(self.u_c[t, v])), repr(float(self.u_d[t, v])),
                                repr(float(self.soc[t + 1, v]))])

    def summary(self) -> dict:
        return {"status": self.status, "objective": self.objective, "dt_h": self.dt_h, "T": self.T,
                "vehicles": list(self.vehicle_ids), "stations": list(self.station_ids), "costs": self.costs,
                "initial_soc": self.soc[0].tolist(), "station_power": self.station_power.tolist(),
                "max_complementarity": self.complementarity(), "meta": self.meta}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=1)
            fh.write("\n")


def read_schedule_csv(path) -> dict:
    """Read :meth:`FleetSchedule.to_csv` output back into ``{"u_c", "u_d", "soc"}`` arrays (T x n_v)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    vids = list(dict.fromkeys(r["vehicle"] for r in rows))
    T = max(int(r["time"]) for r in rows) + 1 if rows else 0
    out = {k: np.zeros((T, len(vids))) for k in ("u_c", "u_d", "soc")}
    col = {v: i for i, v in enumerate(vids)}
    for r in rows:
        for k in out:
            out[k][int(r["time"]), col[r["vehicle"]]] = float(r[k])
    out["vehicles"] = vids
    return out


def cost_breakdown(scenario: Scenario, objectives: ObjectiveConfig, station_power, soc) -> dict:
    """Evaluate every cost term on a schedule without any solver variables."""
    dt = scenario.dt_h
    e = scenario.timeline.e_dense()
    station_terms = []
    for s, st in enumerate(scenario.stations):
        station_terms.append({f"{k}:{spec.kind}": obj.station_term(spec, station_power[:, s], st, dt)
                              for k, spec in enumerate(objectives.station)})
    agg = station_power.sum(axis=1)
    system_terms = {f"{k}:{spec.kind}": obj.system_term(spec, agg, dt)
                    for k, spec in enumerate(objectives.active_system)}
    soc_pen = 0.0
    shortfall = 0.0
    for v, veh in enumerate(scenario.fleet):
        th = soc_thresholds(veh, e[:, v], None)
        soc_pen += obj.soft_soc_penalty(soc[:, v], th, objectives.soc_weight)
        shortfall += float(np.sum(np.maximum(th - soc[:, v], 0.0)))
    station_total = [float(sum(d.values())) for d in station_terms]
    out = {"station": station_total, "station_terms": station_terms, "system": float(sum(system_terms.values())),
           "system_terms": system_terms, "soc_penalty": soc_pen, "soc_shortfall_kwh": shortfall}
    out["total"] = float(sum(station_total) + out["system"] + soc_pen)
    return out


def _apply_terminal(scenario, objectives, station_power, soc, opts):
    # the evaluator above uses the scenario thresholds; a terminal floor adds its own shortfall
    if opts is None or opts.terminal_floor_frac is None:
        return 0.0
    pen = 0.0
    for v, veh in enumerate(scenario.fleet):
        th = max(veh.floor_kwh, opts.terminal_floor_frac * veh.capacity_kwh)
        pen += objectives.soc_weight * (max(th - soc[-1, v], 0.0) ** 2 - max(veh.floor_kwh - soc[-1, v], 0.0) ** 2)
    return pen


def schedule_from_controls(scenario: Scenario, u_c, u_d, objectives: ObjectiveConfig | None = None,
                           opts: FormulationOptions | None = None, soc=None, status="optimal",
                           objective=float("nan")) -> FleetSchedule:
    """Schedule from ``T x n_v`` control arrays; SOC is re-simulated unless a consistent ``soc`` is given."""
    objectives = objectives or scenario.objectives
    tl = scenario.timeline
    T = tl.T
    u_c = np.asarray(u_c, dtype=float)
    u_d = np.zeros_like(u_c) if u_d is None else np.asarray(u_d, dtype=float)
    de = tl.delta_e_dense()
    dyns = [discretize(v, tl.dt_h) for v in scenario.fleet]
    sim = np.column_stack([simulate(v.initial_soc_kwh, d, u_c[:, i], u_d[:, i], de[:, i])
                           for i, (v, d) in enumerate(zip(scenario.fleet, dyns))]) if scenario.fleet \
        else np.zeros((T + 1, 0))
    if soc is None or np.max(np.abs(np.asarray(soc) - sim), initial=0.0) > 1e-9:
        soc = sim
    member = scenario.station_matrix()
    power = np.column_stack([st.net_load_kw for st in scenario.stations]) if scenario.stations \
        else np.zeros((T, 0))
    power = power.copy()
    net = u_c - u_d
    for v in range(u_c.shape[1]):
        t = np.flatnonzero(member[:, v] >= 0)
        np.add.at(power, (t, member[t, v]), net[t, v])
    costs = cost_breakdown(scenario, objectives, power, soc)
    extra = _apply_terminal(scenario, objectives, power, soc, opts)
    if extra:
        costs["soc_penalty"] += extra
        costs["total"] += extra
    return FleetSchedule(tl.dt_h, [v.id for v in scenario.fleet], [s.id for s in scenario.stations],
                         u_c, u_d, np.asarray(soc), power, costs, status, objective)


def extract_solution(problem: QpProblem, sol: QpSolution, layout: Layout, scenario: Scenario,
                     objectives: ObjectiveConfig | None = None,
                     opts: FormulationOptions | None = None) -> FleetSchedule:
    """Read controls out of a solution vector.

    Controls are clipped into their bounds and zeroed where a binary gate is
    off (solver round-off only); the SOC
    trajectory is the solver's when it satisfies the dynamics to 1e-9 kWh and
    is re-simulated from the controls otherwise.
    """
    if sol.status == "infeasible":
        raise ValueError("cannot extract a schedule from an infeasible solution")
    x = np.asarray(sol.x)
    if x.size != problem.n or len(layout.vehicles) != len(scenario.fleet) or layout.T != scenario.T:
        raise ValueError("solution, layout and scenario do not match")
    lo = np.full(problem.n, -np.inf)
    hi = np.full(problem.n, np.inf)
    br = problem.bound_rows
    has = br >= 0
    lo[has] = problem.l[br[has]]
    hi[has] = problem.u[br[has]]
    T = layout.T
    n_v = len(layout.vehicles)
    u_c = np.zeros((T, n_v))
    u_d = np.zeros((T, n_v))
    soc = np.zeros((T + 1, n_v))
    x = x.copy()
    x[gated_off(layout, x)] = 0.0
    for v, vb in enumerate(layout.vehicles):
        u_c[:, v] = np.clip(x[vb.uc], lo[vb.uc], hi[vb.uc])
        if vb.ud is not None:
            u_d[:, v] = np.clip(x[vb.ud], lo[vb.ud], hi[vb.ud])
        soc[:, v] = x[vb.x]
    return schedule_from_controls(scenario, u_c, u_d, objectives, opts, soc, sol.status, sol.obj)


def gated_off(layout: Layout, x) -> np.ndarray:
    """Control indices a switched-off binary gate forces to exactly zero."""
    out = []
    for vb in layout.vehicles:
        if vb.xc.size:
            on = x[vb.xc] > 0.5
            out += [vb.uc[vb.xc_steps[~on]], vb.ud[vb.xc_steps[on]]]
        if vb.c.size:
            off = vb.c_steps[x[vb.c] < 0.5]
            out.append(vb.uc[off])
            if vb.ud is not None:
                out.append(vb.ud[off])
    return np.concatenate(out).astype(int) if out else np.zeros(0, dtype=int)


def pack_controls(layout: Layout, u_c, u_d, n: int) -> np.ndarray:
    """Scatter ``T x n_v`` controls into a zero solution vector (inverse of the extraction).

    Gate binaries are set to match: the direction binary is on unless the
    vehicle discharges, the connection binary is on whenever power flows.
    """
    x = np.zeros(n)
    for v, vb in enumerate(layout.vehicles):
        x[vb.uc] = u_c[:, v]
        if vb.ud is not None:
            x[vb.ud] = u_d[:, v]
        if vb.xc.size:
            x[vb.xc] = (u_d[vb.xc_steps, v] == 0).astype(float)
        if vb.c.size:
            x[vb.c] = ((u_c[vb.c_steps, v] > 0) | (u_d[vb.c_steps, v] > 0)).astype(float)
    return x


# -- solving -----------------------------------------------------------------------------

ORACLE_SETTINGS = SolverSettings(eps_abs=1e-8, eps_rel=1e-8, max_iter=50000)


def solve_problem(problem: QpProblem, settings: SolverSettings | None = None, tol: float = 1e-6,
                  node_limit: int = 20000, time_limit: float | None = None) -> QpSolution:
    settings = settings or ORACLE_SETTINGS
    if problem.binary_vars.size:
        return BranchAndBound(problem, settings, tol=tol, node_limit=node_limit, time_limit=time_limit).solve()
    return SplittingSolver(problem, settings).solve()


def solve_monolithic(scenario: Scenario, objectives: ObjectiveConfig | None = None,
                     opts: FormulationOptions | None = None, settings: SolverSettings | None = None,
                     tol: float = 1e-6, node_limit: int = 20000, time_limit: float | None = None) -> FleetSchedule:
    """Assemble and solve the full-fleet problem (branch-and-bound when binaries are present)."""
    objectives = objectives or scenario.objectives
    opts = opts or FormulationOptions()
    problem, layout = assemble(scenario, objectives, opts)
    sol = solve_problem(problem, settings, tol, node_limit, time_limit)
    if sol.status == "infeasible":
        raise RuntimeError("monolithic problem reported infeasible")
    sched = extract_solution(problem, sol, layout, scenario, objectives, opts)
    sched.meta.update({"solver_iterations": sol.iterations, "nodes": sol.nodes, "gap": sol.gap,
                       "n_binaries": int(problem.binary_vars.size), "n_vars": problem.n, "n_rows": problem.m})
    return sched


def lexicographic_peak_shave(scenario: Scenario, opts: FormulationOptions | None = None, tol: float = 1e-3,
                             settings: SolverSettings | None = None, soc_weight: float | None = None) -> FleetSchedule:
    """Cost first, then the flattest station profiles within ``(1 + tol)`` of each station's optimal cost.

    Stage two keeps the SOC penalty in its objective so the requirements met
    in stage one stay met. ``tol = inf`` drops the budget entirely.
    """
    opts = opts or FormulationOptions()
    k = soc_weight if soc_weight is not None else scenario.objectives.soc_weight
    stage1 = ObjectiveConfig([ObjectiveSpec("energy_cost")], [], k)
    first = solve_monolithic(scenario, stage1, opts, settings)
    budgets = np.asarray(first.costs["station"], dtype=float)
    stage2 = ObjectiveConfig([ObjectiveSpec("peak_shave")], [], k)
    dt = scenario.dt_h

    def hook(b: QpBuilder, layout: Layout):
        if not np.isfinite(tol):
            return
        for s, st in enumerate(scenario.stations):
            y = obj.build_energy_cost(b, layout.station_p[s], st.buy_price, st.sell_price, dt, weight=0.0,
                                      name=f"ylex[{st.id}]")
            cap = budgets[s] + tol * abs(budgets[s])
            b.add_rows(np.zeros(y.size, dtype=int), y, np.full(y.size, dt), -np.inf, cap)

    problem, layout = assemble(scenario, stage2, opts, hook=hook)
    sol = solve_problem(problem, settings)
    sched = extract_solution(problem, sol, layout, scenario, stage2, opts)
    sched.meta["stage1_cost"] = budgets.tolist()
    sched.meta["stage1_schedule_total"] = first.costs["total"]
    return sched


def with_options(opts: FormulationOptions, **kw) -> FormulationOptions:
    return replace(opts, **kw)
