"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the benchmark
grid (criterion 4) dominates the runtime.
"""

import dataclasses
import time
from datetime import datetime

import numpy as np
import pytest

from builders import rel, scenario, station, timeline, vehicle
from evflex import admm, bench, flex
from evflex.admm import AdmmParams
from evflex.dynamics import discretize, propagate, simulate
from evflex.monolithic import FormulationOptions, solve_monolithic
from evflex.scenario import make_scenario
from test_dynamics import ode_exact

MONO = FormulationOptions(bidirectional=False, bilinear_mode="none")


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def suite(n=5):
    """4-EV, 12-step instances on two stations."""
    return [bench.random_instance(seed, n_ev=4, T=12) for seed in range(n)]


def test_criterion_1_oracle_equivalence(capsys):
    worst_gap, worst_time, n_ev = 0.0, 0.0, set()
    for seed in range(20):
        sc, oc = bench.random_instance(seed)
        n_ev.add(len(sc.fleet))
        t0 = time.perf_counter()
        oracle = solve_monolithic(sc, oc)
        sched, rec = admm.run(sc, oc, admm.mode_options("integer"))
        worst_time = max(worst_time, time.perf_counter() - t0)
        assert oracle.status == "optimal" and rec.status == "optimal"
        assert sc.strictly_stationary and len(sc.stations) == 2 and sc.T <= 12
        worst_gap = max(worst_gap, rel(sched.meta["jc"], oracle.costs["total"]))
    ok = worst_gap <= 1e-4 and worst_time < 60.0
    report(capsys, 1, ok, f"20 instances, EVs {sorted(n_ev)}: max rel J_c gap {worst_gap:.2e} (<= 1e-4), "
                          f"max time {worst_time:.1f} s (< 60 s)")


@pytest.fixture(scope="module")
def relaxed_runs():
    out = []
    for sc, oc in suite():
        ref = solve_monolithic(sc, oc)
        assert ref.status == "optimal"
        runs = {}
        for mode in ("taylor", "wang"):
            runs[mode] = admm.run(sc, oc, admm.mode_options(mode), AdmmParams(max_iter=800))
        out.append((ref.costs["total"], runs))
    return out


def test_criterion_2_relaxation_convergence(capsys, relaxed_runs):
    gaps = {"taylor": [], "wang": []}
    iters = {"taylor": [], "wang": []}
    for jc_int, runs in relaxed_runs:
        for mode, (sched, rec) in runs.items():
            gaps[mode].append(rel(sched.meta["jc"], jc_int))
            iters[mode].append(rec.k)
    ok = max(gaps["taylor"]) <= 1e-3 and max(gaps["wang"]) <= 1e-2 and max(iters["taylor"]) <= 800
    report(capsys, 2, ok, f"taylor max gap {max(gaps['taylor']):.2e} (<= 1e-3) in <= {max(iters['taylor'])} it; "
                          f"wang max gap {max(gaps['wang']):.2e} (<= 1e-2)")


def test_criterion_3_complementarity(capsys, relaxed_runs):
    taylor = max(float(np.max(r["taylor"][0].u_c * r["taylor"][0].u_d)) for _, r in relaxed_runs)
    wang_every_k = all(all(v == 0.0 for v in r["wang"][1].projected_complementarity_history)
                       and len(r["wang"][1].projected_complementarity_history) == r["wang"][1].k
                       for _, r in relaxed_runs)
    ok = taylor <= 1e-4 and wang_every_k
    report(capsys, 3, ok, f"taylor max u_c*u_d {taylor:.2e} kW^2 (<= 1e-4); wang projected copy exactly "
                          f"complementary at every iteration: {wang_every_k}")


def test_criterion_4_scalability(capsys):
    t0 = time.perf_counter()
    grid = bench.run_benchmark()
    total = time.perf_counter() - t0
    small, large = (min(grid.ev_counts), min(grid.horizons)), (max(grid.ev_counts), max(grid.horizons))

    def t(cell, mode):
        return grid.cell(*cell, mode)["median_time_s"]

    ratio_small = t(small, "decomposed-integer") / t(small, "monolithic-integer")
    ratio_large = t(large, "decomposed-integer") / t(large, "monolithic-integer")
    taylor_large = t(large, "decomposed-taylor") / t(large, "decomposed-integer")
    ok_a = ratio_large < 1 and ratio_large < ratio_small
    ok_b = taylor_large < 1
    mono_status = grid.cell(*large, "monolithic-integer")["status"]
    detail = (f"(a) dec/mono {ratio_large:.3f} at {large} vs {ratio_small:.3f} at {small} "
              f"(monolithic {mono_status}); (b) taylor/dec {taylor_large:.3f}; total {total / 60:.1f} min (< 30)")
    report(capsys, 4, ok_a and ok_b and total < 1800.0, detail)


def envelope_scenario():
    return make_scenario(3, 3, 24, dt_h=1.0, seed=2, pv_kw_per_charger=5.0, start=datetime(2024, 3, 1, 0))


def test_criterion_5_envelope(capsys):
    sc = envelope_scenario()
    prices = (0.0,) + flex.DEFAULT_PRICES
    assert len(flex.DEFAULT_PRICES) == 10 and flex.DEFAULT_PRICES[0] == 10.0 and flex.DEFAULT_PRICES[-1] == 377.5
    env = flex.compute_envelope(sc, prices=prices, hours=[6, 12, 18])
    # cells are ADMM solutions, so costs are compared at the stopping tolerance
    cost_tol = flex.ENVELOPE_PARAMS.eps_rel
    failures, worst_drop = [], 0.0
    for h in env.hours:
        for d in flex.DIRECTIONS:
            p, dev = env.series(h, d)
            if dev[0] != 0.0:
                failures.append(f"a {h}{d}")
            span = dev.max() - dev[0]
            tol = 0.01 * max(span, 1e-12)
            if np.any(np.diff(dev) < -tol):
                failures.append(f"b {h}{d}")
            if dev[-1] - dev[-2] >= 0.1 * max(span, 1e-12) and span > 0:
                failures.append(f"c {h}{d}")
            _, rev = env.series(h, d, "track_revenue")
            if np.any(np.diff(rev) < -1e-6 * max(np.abs(rev).max(), 1.0)):
                failures.append(f"d-rev {h}{d}")
            _, cost = env.series(h, d, "charge_cost")
            order = np.argsort(dev, kind="stable")
            drop = -np.min(np.diff(cost[order]), initial=0.0) / max(np.abs(cost).max(), 1.0)
            worst_drop = max(worst_drop, drop)
            if drop > cost_tol:
                failures.append(f"d-cost {h}{d}")
    ident = max(abs(c.charge_cost + c.soc_penalty - c.track_revenue - c.total_cost) / max(abs(c.total_cost), 1e-12)
                for c in env.cells)
    if ident > 1e-9:
        failures.append("e")
    statuses = {c.status for c in env.cells}
    top = max(c.deviation_mw for c in env.cells)
    report(capsys, 5, not failures and statuses == {"optimal"},
           f"{len(env.cells)} cells, max deviation {top:.4f} MW, identity err {ident:.1e}, "
           f"worst charge-cost drop {worst_drop:.1e} (<= {cost_tol:g}), statuses {sorted(statuses)}"
           + (f", failed checks {failures}" if failures else ""))


def test_criterion_6_dynamics(capsys):
    rng = np.random.default_rng(6)
    err_exact = err_sub = err_eta = 0.0
    for _ in range(300):
        x0, tau, dt = rng.uniform(0, 60), 10 ** rng.uniform(0, 5), rng.uniform(0.05, 2.0)
        ec, ed = rng.uniform(0.5, 1.0, 2)
        uc, ud = rng.uniform(0, 50, 2)
        spec = vehicle(eta_ch=ec, eta_ds=ed, tau=tau)
        d = discretize(spec, dt)
        exact = ode_exact(x0, tau, ec, ed, uc, ud, dt)
        err_exact = max(err_exact, abs(propagate(x0, d, uc, ud) - exact) / max(1.0, abs(exact)))
        n = int(rng.integers(2, 65))
        one = propagate(x0, d, uc, ud)
        fine = simulate(x0, discretize(spec, dt / n), np.full(n, uc), np.full(n, ud))[-1]
        err_sub = max(err_sub, abs(one - fine) / max(1.0, abs(one)))
        lossless = discretize(vehicle(eta_ch=ec, eta_ds=ed), dt)
        u_back = lossless.b_ch / lossless.b_ds * uc
        x = simulate(x0, lossless, [uc, 0.0], [0.0, u_back])
        assert abs(x[-1] - x0) <= 1e-9 * max(1.0, x0)
        err_eta = max(err_eta, abs((u_back * dt) / (uc * dt) - ec * ed) / (ec * ed))
    ok = err_exact <= 1e-12 and err_sub <= 1e-10 and err_eta <= 1e-9
    report(capsys, 6, ok, f"closed-form err {err_exact:.1e} (<= 1e-12), sub-stepping {err_sub:.1e} (<= 1e-10), "
                          f"round-trip ratio err {err_eta:.1e} (<= 1e-9)")


def test_criterion_7_soft_constraints(capsys):
    T, cap = 4, 40.0
    veh = vehicle(cap=cap, x0=10.0, ucmax=11.0, eta_ch=0.95, tau=200.0)
    e = np.zeros((T, 1))
    e[3, 0] = 35.0
    sc = scenario([veh], [station(T=T)], timeline(T, 1, e=e))
    sched = solve_monolithic(sc)
    # enumeration oracle: every control sequence on a 0.25 kW grid over the three steps before the deadline
    d = discretize(veh, sc.dt_h)
    levels = np.linspace(0.0, 11.0, 45)
    best = np.inf
    for a in levels:
        for b in levels:
            x = simulate(10.0, d, [a, b], None)
            x2 = propagate(x[-1], d, levels, 0.0)
            best = min(best, float(np.min(np.maximum(35.0 - x2, 0.0))))
    short = sched.costs["soc_shortfall_kwh"]
    ok = sched.status == "optimal" and sched.costs["soc_penalty"] > 0 and abs(short - best) <= 1e-4
    report(capsys, 7, ok, f"status {sched.status}, Q = {sched.costs['soc_penalty']:.4g}, shortfall {short:.6f} kWh "
                          f"vs oracle {best:.6f}")


def test_criterion_8_nesting(capsys):
    worst = -np.inf
    for seed in range(20):
        sc, oc = bench.random_instance(seed)
        bi = solve_monolithic(sc, oc)
        mono = solve_monolithic(sc, oc, MONO)
        assert bi.status == mono.status == "optimal"
        worst = max(worst, (bi.objective - mono.objective) / max(1.0, abs(bi.objective)))
    ok = worst <= 1e-6
    report(capsys, 8, ok, f"20 instances: max (bi - mono)/|bi| = {worst:.2e} (<= 1e-6)")


def test_criterion_9_protocol(capsys):
    sc, oc = bench.random_instance(3, n_ev=6, T=8, n_stations=3)
    checks = []
    for mode in ("integer", "taylor", "wang"):
        opts = admm.mode_options(mode)
        _, a = admm.run(sc, oc, opts)
        _, b = admm.run(sc, oc, opts, update_order=[2, 0, 1])
        _, c = admm.run(sc, oc, opts, dataclasses.replace(AdmmParams(), workers=3))
        payload = all(m["down"] == [sc.T] * 3 and m["up"] == [sc.T] * 3 for m in a.messages)
        same = all(len(x.z_history) == len(a.z_history)
                   and all(np.array_equal(p, q) for p, q in zip(a.z_history, x.z_history))
                   and all(np.array_equal(p, q) for p, q in zip(a.lam_history, x.lam_history)) for x in (b, c))
        checks.append((mode, payload, same, a.k))
    ok = all(p and s for _, p, s, _ in checks)
    report(capsys, 9, ok, "; ".join(f"{m}: 2T payload {p}, order/worker invariant {s} ({k} it)"
                                     for m, p, s, k in checks))
