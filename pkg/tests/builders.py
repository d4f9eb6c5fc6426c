"""Small hand-built scenarios shared by the tests."""

import math

import numpy as np
import scipy.sparse as sp

from evflex.objectives import ObjectiveConfig, ObjectiveSpec
from evflex.scenario import Scenario, ScenarioTimeline, StationSpec, VehicleSpec


def vehicle(id="v0", cap=40.0, x_min=0.0, x0=10.0, ucmax=11.0, udmax=11.0, eta_ch=1.0, eta_ds=1.0, tau=None,
            home="s0", **kw):
    return VehicleSpec(id, cap, x_min, x0, ucmax, udmax, eta_ch, eta_ds, tau, 0.15, home, **kw)


def station(id="s0", T=2, p_max=100.0, base=0.0, pv=0.0, buy=0.2, sell=0.1, n_chargers=4, p_min=None):
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (T,)).copy()
    return StationSpec(id, n_chargers, p_max, full(base), full(pv), full(buy), full(sell), p_min)


def timeline(T, n_v, dt_h=0.25, l=None, e=None, delta_e=None, start_hour=0.0):
    l = np.ones((T, n_v), dtype=np.int8) if l is None else np.asarray(l)
    e = sp.csc_matrix((T, n_v)) if e is None else sp.csc_matrix(np.asarray(e, dtype=float))
    de = sp.csc_matrix((T, n_v)) if delta_e is None else sp.csc_matrix(np.asarray(delta_e, dtype=float))
    return ScenarioTimeline(dt_h, T, l, e, de, start_hour)


def scenario(fleet, stations, tl, station_obj=("energy_cost",), system=(), soc_weight=1e4):
    oc = ObjectiveConfig([ObjectiveSpec(k) for k in station_obj], list(system), soc_weight)
    return Scenario(list(fleet), list(stations), tl, oc)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


INF = math.inf
