import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import rel, scenario, station, timeline, vehicle
from evflex import admm
from evflex.admm import AdmmParams, AdmmRun, StationWorker, dual_update, z_update, z_update_kernel
from evflex.config import params_from_file, read_params, write_params
from evflex.monolithic import FormulationOptions, solve_monolithic
from evflex.objectives import ObjectiveConfig, ObjectiveSpec, system_term
from evflex.scenario import make_scenario

MONO = admm.mode_options("mono")


def grid_argmin(phi, lo, hi, levels=4, n=2001):
    """Nested 1-D grid search for a convex scalar function."""
    for _ in range(levels):
        g = np.linspace(lo, hi, n)
        k = int(np.argmin([phi(v) for v in g]))
        step = g[1] - g[0]
        lo, hi = g[max(k - 2, 0)] - step, g[min(k + 2, n - 1)] + step
    return g[k]


def z_oracle(r_z, specs, n_s, Pn, dt, rho):
    a, c = n_s * Pn, n_s * rho
    z = r_z.copy()
    for t in range(r_z.size):
        def phi(v, t=t):
            zz = z.copy()
            zz[t] = v
            return sum(system_term(s, a * zz, dt) for s in specs) + 0.5 * c * (v - r_z[t]) ** 2
        z[t] = grid_argmin(phi, r_z[t] - 20.0, r_z[t] + 20.0)
    return z


# -- z and dual updates ----------------------------------------------------------------

def test_z_update_without_system_objective_is_rz():
    pbar, lam = np.array([1.0, -2.0, 0.5]), np.array([0.1, 0.2, -0.3])
    np.testing.assert_array_equal(z_update(pbar, lam, AdmmParams(), [], 3), pbar + lam)


def test_tracking_z_update_tends_to_rz_for_large_rho():
    ref = ObjectiveSpec("track_profile", reference=[5.0, -5.0])
    r_z = np.array([1.0, 2.0])
    z = z_update(r_z, np.zeros(2), AdmmParams(), [ref], 1, rho=1e12)
    np.testing.assert_allclose(z, r_z, atol=1e-9)


T = 6
r_vec = st.lists(st.floats(-5.0, 5.0), min_size=T, max_size=T).map(np.array)


@settings(max_examples=15)
@given(r_vec, st.floats(0.05, 5.0), st.integers(1, 4), st.floats(0.5, 10.0))
def test_tracking_closed_form_matches_grid(r_z, rho, n_s, Pn):
    spec = ObjectiveSpec("track_profile", weight=0.01, reference=np.linspace(-20, 20, T))
    z = z_update(r_z, np.zeros(T), AdmmParams(rho=rho), [spec], n_s, Pn, 0.25)
    np.testing.assert_allclose(z, z_oracle(r_z, [spec], n_s, Pn, 0.25, rho), atol=1e-6)


@settings(max_examples=15)
@given(r_vec, st.floats(10.0, 400.0), st.floats(0.05, 2.0))
def test_flex_linear_closed_form_matches_grid(r_z, price, rho):
    spec = ObjectiveSpec("flex_linear", reference=np.linspace(-30, 30, T), flex_price=price, steps=(1, 2, 3))
    z = z_update(r_z, np.zeros(T), AdmmParams(rho=rho), [spec], 2, 5.0, 0.25)
    np.testing.assert_allclose(z, z_oracle(r_z, [spec], 2, 5.0, 0.25, rho), atol=1e-6)


def test_intraday_closed_form_matches_grid():
    rng = np.random.default_rng(2)
    spec = ObjectiveSpec("intraday_cost", buy_price=rng.uniform(0.2, 0.4, T), sell_price=rng.uniform(0.0, 0.1, T))
    r_z = rng.normal(size=T) * 0.1
    z = z_update(r_z, np.zeros(T), AdmmParams(rho=0.5), [spec], 3, 2.0, 0.25)
    np.testing.assert_allclose(z, z_oracle(r_z, [spec], 3, 2.0, 0.25, 0.5), atol=1e-6)


def test_combined_objectives_use_kernel():
    rng = np.random.default_rng(3)
    specs = [ObjectiveSpec("track_profile", weight=0.02, reference=rng.normal(size=T) * 10),
             ObjectiveSpec("flex_linear", reference=rng.normal(size=T) * 10, flex_price=200.0, steps=(0, 4))]
    r_z = rng.normal(size=T)
    z = z_update(r_z, np.zeros(T), AdmmParams(rho=0.3), specs, 2, 4.0, 0.25)
    np.testing.assert_allclose(z, z_oracle(r_z, specs, 2, 4.0, 0.25, 0.3), atol=1e-5)
    # a single spec sent through the kernel agrees with its closed form
    one = specs[:1]
    np.testing.assert_allclose(z_update_kernel(r_z, one, 2, 4.0, 0.25, 0.3),
                               z_update(r_z, np.zeros(T), AdmmParams(rho=0.3), one, 2, 4.0, 0.25), atol=1e-6)


def test_dual_update_examples():
    lam = np.array([0.5, -1.0])
    np.testing.assert_array_equal(dual_update(lam, [2.0, 3.0], [2.0, 3.0]), lam)
    np.testing.assert_array_equal(dual_update(lam, [1.0, 1.0], [0.25, 2.0]), lam + [0.75, -1.0])


def test_dual_update_telescopes():
    rng = np.random.default_rng(0)
    lam0 = rng.normal(size=4)
    lam, gaps = lam0, np.zeros(4)
    for _ in range(20):
        p, z = rng.normal(size=4), rng.normal(size=4)
        lam = dual_update(lam, p, z)
        gaps += p - z
    np.testing.assert_allclose(lam, lam0 + gaps, atol=1e-12)


# -- station updates ---------------------------------------------------------------------

def test_uncoupled_station_update_is_zero_without_demand():
    sc = scenario([vehicle()], [station(T=4)], timeline(4, 1))
    w = StationWorker(sc, 0, sc.objectives, MONO, AdmmParams(rho=0.0, gamma=0.0), 11.0, 0.0, 0.0)
    w.step(np.zeros(4))
    np.testing.assert_allclose(w.u, 0.0, atol=1e-8)


def two_station_scenario(T=4, e_kwh=None, identical=False):
    fleet = [vehicle("v0", x0=10.0, home="s0"), vehicle("v1", x0=10.0 if identical else 25.0, home="s1")]
    e = np.zeros((T, 2))
    if e_kwh is not None:
        e[-1] = e_kwh
    other = station("s1", T=T, base=1.0) if identical else station("s1", T=T, base=2.0, pv=3.0)
    stations = [station("s0", T=T, base=1.0), other]
    return fleet, stations, timeline(T, 2, e=e)


def test_single_station_without_fleet_objective_converges_at_once():
    T = 4
    e = np.zeros((T, 1))
    e[-1] = 14.0
    sc = scenario([vehicle()], [station(T=T, base=[1, 2, 0, 1])], timeline(T, 1, e=e))
    sched, rec = admm.run(sc)
    assert rec.status == "optimal" and rec.k <= 2
    ref = solve_monolithic(sc)
    assert rel(sched.costs["total"], ref.costs["total"]) <= 1e-6


def test_identical_stations_get_identical_schedules():
    T = 4
    fleet, stations, tl = two_station_scenario(T, e_kwh=16.0, identical=True)
    ref = ObjectiveSpec("track_profile", weight=0.05, reference=[10.0, 4.0, -3.0, 8.0])
    sc = scenario(fleet, stations, tl, system=[ref])
    sched, rec = admm.run(sc, opts=admm.mode_options("integer"))
    assert rec.status == "optimal"
    np.testing.assert_allclose(sched.u_c[:, 0], sched.u_c[:, 1], atol=1e-4)
    np.testing.assert_allclose(sched.u_d[:, 0], sched.u_d[:, 1], atol=1e-4)
    oracle = solve_monolithic(sc)
    assert rel(sched.meta["jc"], oracle.costs["total"]) <= 1e-4


def test_mono_directional_matches_monolithic():
    sc = make_scenario(2, 2, 8, seed=3, pv_kw_per_charger=5.0)
    ref = ObjectiveSpec("track_profile", weight=0.01, reference=np.linspace(0, 30, 8))
    oc = ObjectiveConfig([ObjectiveSpec("energy_cost")], [ref])
    sched, rec = admm.run(sc, oc, MONO)
    assert rec.status == "optimal"
    oracle = solve_monolithic(sc, oc, FormulationOptions(bidirectional=False, bilinear_mode="none"))
    assert rel(sched.meta["jc"], oracle.costs["total"]) <= 1e-4


def test_non_stationary_scenario_rejected():
    fleet = [vehicle("v0", home="s0")]
    sc = scenario(fleet, [station("s0", T=4), station("s1", T=4)], timeline(4, 1))
    moved = dataclasses.replace(sc.timeline, station_of=np.array([[0], [1], [1], [0]]))
    sc = dataclasses.replace(sc, timeline=moved)
    with pytest.raises(ValueError, match="monolithic"):
        admm.run(sc)


# -- protocol invariants -------------------------------------------------------------------

def coupled_instance(n_s=3):
    sc = make_scenario(n_s, 2, 6, seed=11, pv_kw_per_charger=5.0)
    ref = ObjectiveSpec("track_profile", weight=0.01, reference=np.linspace(-5, 25, 6))
    return sc, ObjectiveConfig([ObjectiveSpec("energy_cost")], [ref])


def test_residual_and_messages():
    sc, oc = coupled_instance()
    _, rec = admm.run(sc, oc, admm.mode_options("taylor"))
    assert rec.status == "optimal"
    assert rec.primal_residual() == rec.r_history[-1]
    for msg in rec.messages:
        assert msg["down"] == [sc.T] * 3 and msg["up"] == [sc.T] * 3
    assert rec.z.shape == rec.lam.shape == (sc.T,)
    assert len(rec.r_history) == len(rec.s_history) == rec.k


@pytest.mark.parametrize("mode", ["integer", "taylor"])
def test_order_and_worker_count_do_not_change_iterates(mode):
    sc, oc = coupled_instance()
    opts = admm.mode_options(mode)
    p = AdmmParams(max_iter=15)
    _, a = admm.run(sc, oc, opts, p)
    _, b = admm.run(sc, oc, opts, p, update_order=[2, 0, 1])
    _, c = admm.run(sc, oc, opts, dataclasses.replace(p, workers=3))
    for other in (b, c):
        assert all(np.array_equal(x, y) for x, y in zip(a.z_history, other.z_history))
        assert all(np.array_equal(x, y) for x, y in zip(a.lam_history, other.lam_history))


def test_bad_update_order_rejected():
    sc, oc = coupled_instance(2)
    with pytest.raises(ValueError):
        admm.run(sc, oc, update_order=[0, 0])


def test_run_record_json(tmp_path):
    sc, oc = coupled_instance(2)
    _, rec = admm.run(sc, oc, admm.mode_options("wang"), AdmmParams(max_iter=5))
    rec.to_json(tmp_path / "run.json")
    import json
    d = json.loads((tmp_path / "run.json").read_text())
    assert d["iterations"] == 5 and len(d["jc"]) == 5
    assert len(d["residuals"]["primal"]) == 5 and len(d["projected_complementarity_kw2"]) == 5
    assert set(d["timing_s"]) == {"station", "z", "dual", "total"}


def test_params_validation():
    for bad in (dict(rho=-1.0), dict(alpha=0.0), dict(max_iter=0), dict(rho_b=0.0), dict(taylor_variant="x"),
                dict(eps_abs=0.0)):
        with pytest.raises(ValueError):
            AdmmParams(**bad)
    with pytest.raises(ValueError):
        AdmmParams.from_dict({"unknown": 1})


def test_params_file_round_trip(tmp_path):
    p = AdmmParams(rho=2.5, gamma=0.0, max_iter=123, rho_b=7.0, taylor_variant="printed", init_seed=4, workers=2)
    write_params(p, tmp_path / "p.txt")
    assert params_from_file(tmp_path / "p.txt") == p
    (tmp_path / "q.txt").write_text("# comment\nrho = 3  ; inline\ninit_seed = none\n")
    assert read_params(tmp_path / "q.txt") == {"rho": "3", "init_seed": "none"}
    q = params_from_file(tmp_path / "q.txt")
    assert q.rho == 3.0 and q.init_seed is None
