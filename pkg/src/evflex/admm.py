"""Station-wise sharing ADMM.

The fleet problem ``min sum_s [C(p_s) + Q(x_s)] + S(sum_s p_s)`` is split by
station. With station powers normalized by ``Pn`` (fleet mean charge limit)
and ``pbar`` the station average, one iteration is

    r_u,s = p_s^k - pbar^k + z^k - lam^k
    u_s   <- argmin C + Q + rho/2 ||p_s - r_u,s||^2 + gamma/2 ||u_s - u_s^k||^2
    r_z   = pbar^{k+1} + lam^k
    z     <- argmin S(n_s Pn z) + n_s rho/2 ||z - r_z||^2
    lam   <- lam + pbar^{k+1} - z^{k+1}

The coordinator broadcasts ``v = z - lam - pbar`` (T values) and receives
``p_s`` (T values) from each station, so every station exchanges one length-T
series per direction per iteration.

Stopping follows the sharing form of the usual primal/dual residual test
(N = n_s stations, each copy of length T). The gamma term is the proximal
damping's share of the station optimality conditions; without it a damped
run with rho = 0 would stop after one step:

    r = sqrt(N) ||pbar - z||
    s = sqrt(rho^2 sum_s ||(p_s - pbar) - (p_s - pbar)^prev + z - z^prev||^2
             + gamma^2 sum_s ||u_s - u_s^prev||^2)
    eps_pri  = sqrt(N T) eps_abs + eps_rel max(||p||, ||(p_s - pbar + z)_s||)
    eps_dual = sqrt(N T) eps_abs + eps_rel rho sqrt(N) ||lam||
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import bilinear
from . import objectives as obj
from .monolithic import FleetSchedule, FormulationOptions, assemble, gated_off, schedule_from_controls
from .objectives import ObjectiveConfig
from .qp import BranchAndBound, QpBuilder, SolverSettings, SplittingSolver
from .scenario import Scenario

log = logging.getLogger(__name__)

STATION_SETTINGS = SolverSettings(eps_abs=1e-8, eps_rel=1e-8, max_iter=20000)
MODES = ("integer", "taylor", "wang", "continuous", "mono")


@dataclass
class AdmmParams:
    rho: float = 1.0
    gamma: float = 0.1
    alpha: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 800
    # complementarity handling inside the station workers
    rho_b: float = 100.0
    gamma_b: float = 1e4
    alpha_b: float = 1.0
    taylor_variant: str = "linearized"
    nesting: int = 1
    relax_tol: float = 1e-4
    init_seed: int | None = None
    workers: int = 1
    node_limit: int = 20
    station_tol: float = 1e-8
    bb_tol: float = 1e-6

    def __post_init__(self):
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("rho and gamma must be non-negative")
        if not (0.0 < self.alpha <= 1.0) or not (0.0 < self.alpha_b <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.eps_abs <= 0 or self.eps_rel < 0:
            raise ValueError("need eps_abs > 0 and eps_rel >= 0")
        if self.max_iter < 1 or self.nesting < 1 or self.workers < 1:
            raise ValueError("max_iter, nesting and workers must be at least 1")
        if self.rho_b <= 0 or self.gamma_b < 0:
            raise ValueError("need rho_b > 0 and gamma_b >= 0")
        if self.taylor_variant not in bilinear.TAYLOR_VARIANTS:
            raise ValueError(f"taylor_variant must be one of {bilinear.TAYLOR_VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdmmParams":
        known = {f.name: f for f in fields(cls)}
        bad = set(d) - set(known)
        if bad:
            raise ValueError(f"unknown ADMM parameters: {sorted(bad)}")
        out = {}
        for k, v in d.items():
            if isinstance(v, str) and k != "taylor_variant":
                v = _coerce(v, known[k].default, k)
            out[k] = v
        return cls(**out)


def _coerce(v, default, key):
    if v is None or (isinstance(v, str) and v.lower() in ("none", "null", "")):
        return None
    if isinstance(default, bool):
        return str(v).lower() in ("1", "true", "yes")
    if isinstance(default, int) or key == "init_seed":
        return int(v)
    return float(v)


def mode_options(mode: str, base: FormulationOptions | None = None) -> FormulationOptions:
    """Formulation options for a decomposition mode name."""
    base = base or FormulationOptions()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "mono":
        return FormulationOptions(base.strictly_stationary, base.stations_not_downsized, False, "none",
                                  base.terminal_floor_frac)
    bm = "none" if mode == "continuous" else mode
    return FormulationOptions(base.strictly_stationary, base.stations_not_downsized, True, bm,
                              base.terminal_floor_frac)


def options_mode(opts: FormulationOptions) -> str:
    if not opts.bidirectional:
        return "mono"
    return "continuous" if opts.bilinear_mode == "none" else opts.bilinear_mode


# -- z and dual updates -------------------------------------------------------------

def _soft(d, kappa):
    return np.sign(d) * np.maximum(np.abs(d) - kappa, 0.0)


def z_update(p_bar, lam, params: AdmmParams, system: list, n_s: int, Pn: float = 1.0, dt_h: float = 1.0,
             rho: float | None = None) -> np.ndarray:
    """Minimize ``S(n_s Pn z) + n_s rho / 2 ||z - r_z||^2`` with ``r_z = p_bar + lam``.

    Tracking, flexibility and intraday terms on their own have closed forms;
    combinations fall back to the QP kernel.
    """
    rho = params.rho if rho is None else rho
    r_z = np.asarray(p_bar, dtype=float) + np.asarray(lam, dtype=float)
    specs = [s for s in system if s.kind != "none"]
    if not specs:
        return r_z
    if rho <= 0:
        raise ValueError("a fleet-level objective needs rho > 0")
    a = n_s * Pn
    c = n_s * rho
    if len(specs) == 1:
        spec = specs[0]
        if spec.kind == "track_profile":
            w = spec.weight
            return (2 * w * a * spec.reference + c * r_z) / (2 * w * a * a + c)
        if spec.kind == "flex_linear":
            z = r_z.copy()
            st = np.asarray(spec.steps, dtype=int)
            if st.size:
                kappa = spec.weight * spec.flex_price * dt_h / 1000.0 * a / c
                target = spec.reference[st] / a
                z[st] = target + _soft(r_z[st] - target, kappa)
            return z
        if spec.kind == "intraday_cost":
            gb = spec.weight * spec.buy_price * dt_h * a / c
            gs = spec.weight * spec.sell_price * dt_h * a / c
            return np.where(r_z - gb > 0, r_z - gb, np.where(r_z - gs < 0, r_z - gs, 0.0))
    return z_update_kernel(r_z, specs, n_s, Pn, dt_h, rho)


def z_update_kernel(r_z, specs, n_s, Pn, dt_h, rho) -> np.ndarray:
    """Generic z step through the QP kernel, variable ``P = n_s Pn z`` in kW."""
    T = r_z.size
    a = n_s * Pn
    b = QpBuilder()
    P = b.add_var("P", T)
    obj.build_system_objectives(b, specs, P, dt_h)
    b.add_square(P, n_s * rho / (2 * a * a), a * r_z)
    sol = SplittingSolver(b.build(), STATION_SETTINGS).solve()
    if sol.status != "optimal":
        raise RuntimeError(f"z update failed with status {sol.status}")
    return sol.x[P] / a


def dual_update(lam, p_bar_next, z_next) -> np.ndarray:
    return np.asarray(lam) + np.asarray(p_bar_next) - np.asarray(z_next)


def _pbar(p: np.ndarray) -> np.ndarray:
    # fixed summation order over stations
    out = np.zeros(p.shape[1])
    for row in p:
        out = out + row
    return out / p.shape[0]


def primal_residual(p: np.ndarray, z: np.ndarray) -> float:
    return float(np.sqrt(p.shape[0]) * np.linalg.norm(_pbar(p) - z))


# -- station workers ----------------------------------------------------------------

@dataclass
class StationStats:
    solves: int = 0
    iterations: int = 0
    nodes: int = 0
    inexact: int = 0
    time_s: float = 0.0


class StationWorker:
    """Owns one station's QP/MIQP workspace, its previous iterate and its relaxation state."""

    def __init__(self, scenario: Scenario, s: int, objectives: ObjectiveConfig, opts: FormulationOptions,
                 params: AdmmParams, Pn: float, rho: float, gamma: float):
        st = scenario.stations[s]
        self.station_id = st.id
        self.members = scenario.members()[s]
        self.sub = scenario.subset([st.id])
        self.objectives = ObjectiveConfig(list(objectives.station), [], objectives.soc_weight)
        self.opts = opts
        self.params = params
        self.Pn = Pn
        self.rho = rho
        self.gamma = gamma
        self.T = scenario.T
        problem, layout = assemble(self.sub, self.objectives, opts)
        self.problem, self.layout = problem, layout
        self.p_idx = layout.station_p[0]
        self.uc = np.concatenate([vb.uc for vb in layout.vehicles]) if layout.vehicles else np.zeros(0, int)
        self.ud = np.concatenate([vb.ud for vb in layout.vehicles]) \
            if layout.vehicles and layout.vehicles[0].ud is not None else np.zeros(0, int)
        self.ctrl = np.r_[self.uc, self.ud].astype(int)
        n = problem.n
        d = np.zeros(n)
        d[self.p_idx] += rho / Pn**2
        d[self.ctrl] += gamma / Pn**2
        self.P_base = (problem.P + sp.diags(d)).tocsc()
        self.q0 = problem.q.copy()
        problem.P = self.P_base
        settings = SolverSettings(eps_abs=params.station_tol, eps_rel=params.station_tol, max_iter=20000)
        self.integer = problem.binary_vars.size > 0
        if self.integer:
            self.solver = BranchAndBound(problem, settings, tol=params.bb_tol, node_limit=params.node_limit)
        else:
            self.solver = SplittingSolver(problem, settings)
        self.net = self.sub.stations[0].net_load_kw.copy()
        self.u = np.zeros(self.ctrl.size)
        self.x = None
        self.relax = None
        mode = options_mode(opts)
        if mode in ("taylor", "wang"):
            self.relax = bilinear.RelaxationState.initial(mode, self.uc.size, params.rho_b, params.gamma_b,
                                                          params.alpha_b if mode == "taylor" else 1.0,
                                                          params.taylor_variant,
                                                          None if params.init_seed is None
                                                          else params.init_seed + 1000 * s)
            if params.init_seed is not None:
                self.u = self.relax.z_cur * Pn
                self.u = np.minimum(self.u, self._ctrl_ub())
                self.relax.z_cur = self.u / Pn
                self.relax.z_prev = self.relax.z_cur.copy()
        self.stats = StationStats()
        self.p = self.power(self.u)

    def _ctrl_ub(self):
        br = self.problem.bound_rows[self.ctrl]
        return self.problem.u[br]

    def power(self, u) -> np.ndarray:
        """Station net power (normalized) implied by the stacked controls."""
        k = self.uc.size
        uc = u[:k].reshape(-1, self.T)
        ud = u[k:].reshape(-1, self.T) if self.ud.size else np.zeros_like(uc)
        return (self.net + (uc - ud).sum(axis=0)) / self.Pn

    def _solve(self, q, P=None):
        if P is not None:
            self.solver.update(q=q, P=P)
        else:
            self.solver.update(q=q)
        t0 = time.perf_counter()
        if self.integer:
            sol = self.solver.solve(self.solver.last_x, self.solver.last_y)
        else:
            sol = self.solver.solve()
        self.stats.time_s += time.perf_counter() - t0
        self.stats.solves += 1
        self.stats.iterations += sol.iterations
        self.stats.nodes += sol.nodes
        if sol.status in ("infeasible", "unbounded") or not np.all(np.isfinite(sol.x)):
            raise RuntimeError(f"station {self.station_id}: subproblem {sol.status}")
        if sol.status != "optimal":
            self.stats.inexact += 1
        return sol

    def _relax_terms(self):
        h_cc, h_cd, h_dd, g = bilinear.penalty(self.relax)
        k = self.uc.size
        Pn = self.Pn
        rows = np.r_[self.uc, self.ud, self.uc, self.ud]
        cols = np.r_[self.uc, self.ud, self.ud, self.uc]
        vals = np.r_[h_cc, h_dd, h_cd, h_cd] / Pn**2
        n = self.problem.n
        dP = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        dq = np.zeros(n)
        dq[self.uc] = g[:k] / Pn
        dq[self.ud] = g[k:] / Pn
        return dP, dq

    def step(self, v: np.ndarray) -> np.ndarray:
        """One station update given the broadcast ``v``; returns the new normalized power (T values)."""
        r_u = self.p + v
        q = self.q0.copy()
        q[self.p_idx] += -self.rho / self.Pn * r_u
        q[self.ctrl] += -self.gamma / self.Pn**2 * self.u
        u_prev = self.u
        if self.relax is None:
            sol = self._solve(q)
            self.x = sol.x
            x = sol.x
            if self.integer:
                x = x.copy()
                x[gated_off(self.layout, x)] = 0.0
            self.u = np.clip(x[self.ctrl], 0.0, self._ctrl_ub())
        else:
            for _ in range(self.params.nesting):
                dP, dq = self._relax_terms()
                sol = self._solve(q + dq, self.P_base + dP)
                u_new = np.clip(sol.x[self.ctrl], 0.0, self._ctrl_ub())
                self.relax = bilinear.advance(self.relax, u_new / self.Pn, sol.x)
            self.x = self.relax.primal
            self.u = self.relax.z_cur * self.Pn
        self.u_prev = u_prev
        self.p = self.power(self.u)
        return self.p

    def local_cost(self) -> tuple:
        """``(C(p_s), Q(x_s), gamma/2 ||u - u_prev||^2)`` in normalized units for the damping."""
        p_kw = self.p * self.Pn
        st = self.sub.stations[0]
        F = sum(obj.station_term(spec, p_kw, st, self.sub.dt_h) for spec in self.objectives.station)
        Q = 0.0
        if self.x is not None:
            for vb in self.layout.vehicles:
                Q += obj.soft_soc_penalty(self.x[vb.x], vb.thresholds, self.objectives.soc_weight)
        du = (self.u - getattr(self, "u_prev", self.u)) / self.Pn
        return float(F), float(Q), float(0.5 * self.params.gamma * du @ du)

    def complementarity_kw2(self) -> float:
        k = self.uc.size
        return float(np.max(self.u[:k] * self.u[k:], initial=0.0)) if self.ud.size else 0.0

    def controls(self) -> tuple:
        """``T x n_vs`` charge and discharge arrays."""
        k = self.uc.size
        uc = self.u[:k].reshape(-1, self.T).T
        ud = self.u[k:].reshape(-1, self.T).T if self.ud.size else np.zeros_like(uc)
        return uc, ud


# -- run record -----------------------------------------------------------------------

@dataclass
class AdmmRun:
    params: AdmmParams
    mode: str
    Pn: float
    station_ids: list
    k: int = 0
    z: np.ndarray = None
    lam: np.ndarray = None
    p: np.ndarray = None
    status: str = "running"
    r_history: list = field(default_factory=list)
    s_history: list = field(default_factory=list)
    eps_pri_history: list = field(default_factory=list)
    eps_dual_history: list = field(default_factory=list)
    jc_history: list = field(default_factory=list)
    complementarity_history: list = field(default_factory=list)
    projected_complementarity_history: list = field(default_factory=list)
    z_history: list = field(default_factory=list)
    lam_history: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    timing: dict = field(default_factory=lambda: {"station": 0.0, "z": 0.0, "dual": 0.0, "total": 0.0})
    station_stats: list = field(default_factory=list)
    coupling: dict = field(default_factory=dict)

    def primal_residual(self) -> float:
        """Recompute ``sqrt(n_s) ||pbar - z||`` from the stored state."""
        return primal_residual(self.p, self.z)

    @property
    def converged(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "mode": self.mode, "Pn": self.Pn,
                "stations": list(self.station_ids), "iterations": self.k, "status": self.status,
                "z": self.z.tolist(), "lambda": self.lam.tolist(), "p": self.p.tolist(),
                "residuals": {"primal": self.r_history, "dual": self.s_history,
                              "eps_pri": self.eps_pri_history, "eps_dual": self.eps_dual_history},
                "jc": self.jc_history, "complementarity_kw2": self.complementarity_history,
                "projected_complementarity_kw2": self.projected_complementarity_history,
                "messages_per_iteration": self.messages[-1] if self.messages else None,
                "timing_s": self.timing, "station_stats": [asdict(s) for s in self.station_stats],
                "coupling": self.coupling}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


# -- coordinator --------------------------------------------------------------------

def normalization(scenario: Scenario) -> float:
    """Fleet mean charge limit in kW (1 for an empty fleet)."""
    if not scenario.fleet:
        return 1.0
    pn = float(np.mean([v.max_charge_kw for v in scenario.fleet]))
    return pn if pn > 0 else 1.0


def run(scenario: Scenario, objectives: ObjectiveConfig | None = None, opts: FormulationOptions | None = None,
        params: AdmmParams | None = None, update_order=None, callback=None) -> tuple:
    """Decomposed solve; returns ``(FleetSchedule, AdmmRun)``.

    Parameters
    ----------
    update_order : sequence of int, optional
        Order in which station jobs are submitted. Results are gathered by
        station index, so the order never changes the iterates.
    callback : callable, optional
        ``callback(run)`` after every iteration.
    """
    objectives = objectives or scenario.objectives
    opts = opts or FormulationOptions()
    params = params or AdmmParams()
    if not scenario.strictly_stationary or not opts.strictly_stationary:
        raise ValueError("the decomposition needs a strictly stationary scenario; use the monolithic solver")
    if not scenario.stations:
        raise ValueError("scenario has no stations")
    T, n_s = scenario.T, len(scenario.stations)
    dt = scenario.dt_h
    system = objectives.active_system
    Pn = normalization(scenario)
    # without a fleet-level cost the stations are independent; coupling and damping only slow them down
    decoupled = not system
    mode = options_mode(opts)
    rho_eff = 0.0 if decoupled else params.rho
    gamma_eff = 0.0 if decoupled and mode not in ("taylor", "wang") else params.gamma
    workers = [StationWorker(scenario, s, objectives, opts, params, Pn, rho_eff, gamma_eff) for s in range(n_s)]
    order = list(range(n_s)) if update_order is None else [int(i) for i in update_order]
    if sorted(order) != list(range(n_s)):
        raise ValueError("update_order must be a permutation of the station indices")

    p = np.vstack([w.p for w in workers])
    pbar = _pbar(p)
    z = pbar.copy()
    lam = np.zeros(T)
    rec = AdmmRun(params, mode, Pn, [w.station_id for w in workers], z=z, lam=lam, p=p,
                  coupling={"rho": rho_eff, "gamma": gamma_eff, "decoupled": decoupled})
    pool = ThreadPoolExecutor(max_workers=params.workers) if params.workers > 1 and n_s > 1 else None
    t_start = time.perf_counter()
    sqrtNT = np.sqrt(n_s * T)
    try:
        for k in range(1, params.max_iter + 1):
            v = z - lam - pbar
            t0 = time.perf_counter()
            new = [None] * n_s
            if pool is None:
                for s in order:
                    new[s] = workers[s].step(v.copy())
            else:
                futs = {s: pool.submit(workers[s].step, v.copy()) for s in order}
                for s in range(n_s):
                    new[s] = futs[s].result()
            t1 = time.perf_counter()
            p_new = np.vstack(new)
            pbar_new = _pbar(p_new)
            z_new = z_update(pbar_new, lam, params, system, n_s, Pn, dt, rho=rho_eff)
            t2 = time.perf_counter()
            lam_new = dual_update(lam, pbar_new, z_new)
            t3 = time.perf_counter()

            r = primal_residual(p_new, z_new)
            dev = (p_new - pbar_new) - (p - pbar) + (z_new - z)
            du = sum(float(np.sum((w.u - w.u_prev) ** 2)) for w in workers) / Pn**2
            s_res = float(np.sqrt(rho_eff**2 * np.sum(dev * dev) + gamma_eff**2 * du))
            zs = p_new - pbar_new + z_new
            eps_pri = sqrtNT * params.eps_abs + params.eps_rel * max(np.linalg.norm(p_new), np.linalg.norm(zs))
            eps_dual = sqrtNT * params.eps_abs + params.eps_rel * rho_eff * np.sqrt(n_s) * np.linalg.norm(lam_new)

            p, pbar, z, lam = p_new, pbar_new, z_new, lam_new
            rec.k = k
            rec.p, rec.z, rec.lam = p, z, lam
            rec.r_history.append(r)
            rec.s_history.append(s_res)
            rec.eps_pri_history.append(float(eps_pri))
            rec.eps_dual_history.append(float(eps_dual))
            rec.z_history.append(z.copy())
            rec.lam_history.append(lam.copy())
            rec.messages.append({"down": [int(v.size)] * n_s, "up": [int(x.size) for x in new]})
            rec.timing["station"] += t1 - t0
            rec.timing["z"] += t2 - t1
            rec.timing["dual"] += t3 - t2

            parts = [w.local_cost() for w in workers]
            F_sys = sum(obj.system_term(spec, p.sum(axis=0) * Pn, dt) for spec in system)
            rec.jc_history.append(float(sum(a + b + c for a, b, c in parts) + F_sys))
            comp = max(w.complementarity_kw2() for w in workers)
            rec.complementarity_history.append(comp)
            relax_ok = True
            if mode == "taylor":
                relax_ok = comp <= params.relax_tol
            elif mode == "wang":
                rec.projected_complementarity_history.append(
                    max(bilinear.complementarity(w.relax.zt) * Pn**2 for w in workers))
                gap = max(bilinear.relaxation_residual(w.relax) * Pn for w in workers)
                relax_ok = gap <= params.relax_tol
            if callback is not None:
                callback(rec)
            log.debug("admm k=%d r=%.3e/%.3e s=%.3e/%.3e jc=%.6g comp=%.2e", k, r, eps_pri, s_res, eps_dual,
                      rec.jc_history[-1], comp)
            if r <= eps_pri and s_res <= eps_dual and relax_ok:
                rec.status = "optimal"
                break
        else:
            rec.status = "max_iter"
    finally:
        if pool is not None:
            pool.shutdown()
    rec.timing["total"] = time.perf_counter() - t_start
    rec.station_stats = [w.stats for w in workers]
    return assemble_schedule(scenario, objectives, opts, workers, rec), rec


def assemble_schedule(scenario, objectives, opts, workers, rec: AdmmRun) -> FleetSchedule:
    T, n_v = scenario.T, len(scenario.fleet)
    u_c = np.zeros((T, n_v))
    u_d = np.zeros((T, n_v))
    for w in workers:
        uc, ud = w.controls()
        u_c[:, w.members] = uc
        u_d[:, w.members] = ud
    sched = schedule_from_controls(scenario, u_c, u_d, objectives, opts, status=rec.status)
    damp = sum(w.local_cost()[2] for w in workers)
    sched.objective = sched.costs["total"]
    sched.meta.update({"iterations": rec.k, "mode": rec.mode, "jc": sched.costs["total"] + damp,
                       "damping": damp})
    return sched


def solve_decomposed(scenario: Scenario, mode: str = "integer", objectives=None, params=None,
                     base: FormulationOptions | None = None, **kw) -> tuple:
    """:func:`run` with the formulation picked by mode name."""
    return run(scenario, objectives, mode_options(mode, base), params, **kw)
