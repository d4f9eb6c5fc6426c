"""Fleet, station and timeline data model, booking ingestion and a synthetic generator.

Timeline conventions (``T`` steps of ``dt_h`` hours, step ``t`` covers
``[t dt, (t+1) dt)``):

* ``l[t, v] = 1`` when vehicle ``v`` sits at its station during step ``t``.
* A trip occupying steps ``t_d .. t_a - 1`` puts its energy requirement on
  ``e[t_d, v]`` (the SOC at the start of step ``t_d`` must cover it) and the
  same energy on ``delta_e[t_a, v]`` (subtracted while stepping from ``t_a``
  to ``t_a + 1``).
* Trips running past the horizon keep ``e`` and drop ``delta_e``. Trips that
  were already under way at ``t = 0`` carry neither, since the SOC they need
  was spent before the first controllable step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np
import scipy.sparse as sp

from .objectives import ObjectiveConfig

log = logging.getLogger(__name__)

BOOKING_COLUMNS = ("vehicle_id", "reservation_start", "reservation_end", "drive_start", "drive_end",
                   "distance_km", "cancelled")

# hourly clear-sky shape, peak 1.0 at 12:00
CLEAR_SKY = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.03, 0.12, 0.28, 0.48, 0.70, 0.88,
                      1.0, 0.97, 0.86, 0.68, 0.46, 0.25, 0.09, 0.02, 0.0, 0.0, 0.0, 0.0])

# bell-shaped reservation probability peaking mid-afternoon, mean 0.21
_USAGE_SHAPE = np.array([0.05, 0.04, 0.03, 0.03, 0.03, 0.05, 0.09, 0.15, 0.21, 0.25, 0.28, 0.31,
                         0.33, 0.35, 0.37, 0.38, 0.38, 0.36, 0.33, 0.28, 0.22, 0.16, 0.11, 0.07])
DEFAULT_USAGE_PROFILE = _USAGE_SHAPE * (0.21 / _USAGE_SHAPE.mean())

# (model, capacity kWh, consumption kWh/km, draw probability)
VEHICLE_CATALOG = (
    ("e-up", 32.3, 0.145, 0.4),
    ("id3", 58.0, 0.16, 0.4),
    ("evito", 60.0, 0.25, 0.2),
)

TARIFFS = {
    "flat": {"buy": lambda h: 0.22, "sell": lambda h: 0.08},
    "tou": {"buy": lambda h: 0.25 if 7 <= h % 24 < 20 else 0.17, "sell": lambda h: 0.08},
}


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VehicleSpec:
    id: str
    capacity_kwh: float
    min_soc_kwh: float
    initial_soc_kwh: float
    max_charge_kw: float
    max_discharge_kw: float
    eta_ch: float = 0.92
    eta_ds: float = 0.92
    tau_sd_h: float | None = None
    consumption_kwh_per_km: float = 0.16
    home_station_id: str = ""
    # SOC level the vehicle should hold at every step; None means min_soc_kwh
    comfort_floor_kwh: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.min_soc_kwh <= self.initial_soc_kwh <= self.capacity_kwh):
            raise ValueError(f"vehicle {self.id}: need 0 <= x_min <= x_start <= x_max, got "
                             f"{self.min_soc_kwh}, {self.initial_soc_kwh}, {self.capacity_kwh}")
        if self.max_charge_kw < 0 or self.max_discharge_kw < 0:
            raise ValueError(f"vehicle {self.id}: power limits must be non-negative")
        if not (0.0 < self.eta_ch <= 1.0 and 0.0 < self.eta_ds <= 1.0):
            raise ValueError(f"vehicle {self.id}: efficiencies must lie in (0, 1]")
        if self.tau_sd_h is not None and not (self.tau_sd_h > 0):
            raise ValueError(f"vehicle {self.id}: tau_sd_h must be positive")
        if self.consumption_kwh_per_km < 0:
            raise ValueError(f"vehicle {self.id}: negative consumption")

    @property
    def floor_kwh(self) -> float:
        return self.min_soc_kwh if self.comfort_floor_kwh is None else max(self.min_soc_kwh, self.comfort_floor_kwh)

    @property
    def range_km(self) -> float:
        return math.inf if self.consumption_kwh_per_km == 0 else self.capacity_kwh / self.consumption_kwh_per_km

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["tau_sd_h"] is not None and math.isinf(d["tau_sd_h"]):
            d["tau_sd_h"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleSpec":
        return cls(**d)


@dataclass(frozen=True)
class StationSpec:
    id: str
    n_max_chargers: int
    p_max_kw: float
    base_load_kw: np.ndarray
    pv_kw: np.ndarray
    buy_price: np.ndarray
    sell_price: np.ndarray
    # lower end of the net power box; None means -p_max_kw
    p_min_kw: float | None = None

    def __post_init__(self):
        for name in ("base_load_kw", "pv_kw", "buy_price", "sell_price"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        T = self.base_load_kw.size
        if any(getattr(self, n).size != T for n in ("pv_kw", "buy_price", "sell_price")):
            raise ValueError(f"station {self.id}: series lengths differ")
        if self.n_max_chargers < 1:
            raise ValueError(f"station {self.id}: need at least one charger")
        if not self.p_max_kw > 0:
            raise ValueError(f"station {self.id}: p_max_kw must be positive")
        if self.p_min_kw is not None and self.p_min_kw > self.p_max_kw:
            raise ValueError(f"station {self.id}: p_min_kw exceeds p_max_kw")
        if np.any(self.base_load_kw < 0) or np.any(self.pv_kw < 0):
            raise ValueError(f"station {self.id}: load and PV series must be non-negative")
        if np.any(self.sell_price > self.buy_price):
            raise ValueError(f"station {self.id}: sell price exceeds buy price")

    @property
    def T(self) -> int:
        return self.base_load_kw.size

    @property
    def p_lower_kw(self) -> float:
        return -self.p_max_kw if self.p_min_kw is None else self.p_min_kw

    @property
    def net_load_kw(self) -> np.ndarray:
        return self.base_load_kw - self.pv_kw

    def to_dict(self) -> dict:
        d = {"id": self.id, "n_max_chargers": self.n_max_chargers, "p_max_kw": self.p_max_kw}
        for name in ("base_load_kw", "pv_kw", "buy_price", "sell_price"):
            d[name] = getattr(self, name).tolist()
        if self.p_min_kw is not None:
            d["p_min_kw"] = self.p_min_kw
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StationSpec":
        return cls(**d)


@dataclass(frozen=True)
class ScenarioTimeline:
    dt_h: float
    T: int
    l: np.ndarray
    e: sp.csc_matrix
    delta_e: sp.csc_matrix
    start_hour: float = 0.0
    # station index per (step, vehicle), -1 while away; None means every vehicle uses its home station
    station_of: np.ndarray | None = None
    flags: tuple = ()

    def __post_init__(self):
        if self.T < 1 or not self.dt_h > 0:
            raise ValueError("timeline needs T >= 1 and dt_h > 0")
        object.__setattr__(self, "l", _frozen(self.l, np.int8))
        if self.l.ndim != 2 or self.l.shape[0] != self.T:
            raise ValueError(f"l must have shape (T, n_v) with T={self.T}, got {self.l.shape}")
        if np.any((self.l != 0) & (self.l != 1)):
            raise ValueError("l must be binary")
        shape = self.l.shape
        for name in ("e", "delta_e"):
            m = sp.csc_matrix(getattr(self, name), dtype=float)
            if m.shape != shape:
                raise ValueError(f"{name} has shape {m.shape}, expected {shape}")
            m.eliminate_zeros()
            if m.nnz and m.data.min() < 0:
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, m)
        if self.station_of is not None:
            so = _frozen(self.station_of, int)
            if so.shape != shape:
                raise ValueError("station_of must match l")
            if np.any((so >= 0) != (self.l == 1)):
                raise ValueError("station_of must be -1 exactly where l = 0")
            object.__setattr__(self, "station_of", so)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def n_v(self) -> int:
        return self.l.shape[1]

    def e_dense(self) -> np.ndarray:
        return self.e.toarray()

    def delta_e_dense(self) -> np.ndarray:
        return self.delta_e.toarray()

    def hours(self) -> np.ndarray:
        """Clock hour (0-24, fractional) at the start of each step."""
        return (self.start_hour + np.arange(self.T) * self.dt_h) % 24.0

    def restrict(self, cols) -> "ScenarioTimeline":
        cols = np.asarray(cols, dtype=int)
        so = None if self.station_of is None else self.station_of[:, cols]
        return ScenarioTimeline(self.dt_h, self.T, self.l[:, cols], self.e[:, cols], self.delta_e[:, cols],
                                self.start_hour, so, self.flags)

    def to_dict(self) -> dict:
        def trip(m):
            c = m.tocoo()
            return {"row": c.row.tolist(), "col": c.col.tolist(), "val": c.data.tolist()}
        d = {"dt_h": self.dt_h, "T": self.T, "start_hour": self.start_hour, "l": self.l.tolist(),
             "e": trip(self.e), "delta_e": trip(self.delta_e), "flags": list(self.flags)}
        if self.station_of is not None:
            d["station_of"] = self.station_of.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTimeline":
        l = np.array(d["l"], dtype=np.int8).reshape(d["T"], -1)

        def mat(t):
            return sp.coo_matrix((np.array(t["val"], dtype=float), (t["row"], t["col"])), shape=l.shape).tocsc()
        return cls(d["dt_h"], d["T"], l, mat(d["e"]), mat(d["delta_e"]), d.get("start_hour", 0.0),
                   None if d.get("station_of") is None else np.array(d["station_of"], dtype=int),
                   tuple(d.get("flags", ())))


@dataclass(frozen=True)
class BookingRecord:
    vehicle_id: str
    reservation_start: datetime
    reservation_end: datetime
    drive_start: datetime
    drive_end: datetime
    distance_km: float
    cancelled: bool = False


@dataclass
class Scenario:
    fleet: list
    stations: list
    timeline: ScenarioTimeline
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {s.id for s in self.stations}
        if self.timeline.n_v != len(self.fleet):
            raise ValueError(f"timeline has {self.timeline.n_v} vehicle columns for {len(self.fleet)} vehicles")
        for s in self.stations:
            if s.T != self.timeline.T:
                raise ValueError(f"station {s.id}: series length {s.T} != T={self.timeline.T}")
        for v in self.fleet:
            if v.home_station_id not in ids:
                raise ValueError(f"vehicle {v.id}: unknown home station {v.home_station_id!r}")

    @property
    def T(self) -> int:
        return self.timeline.T

    @property
    def dt_h(self) -> float:
        return self.timeline.dt_h

    def station_index(self) -> dict:
        return {s.id: i for i, s in enumerate(self.stations)}

    def home_index(self) -> np.ndarray:
        idx = self.station_index()
        return np.array([idx[v.home_station_id] for v in self.fleet], dtype=int)

    def members(self) -> list:
        """Vehicle indices attached to each station, in fleet order."""
        home = self.home_index()
        return [np.flatnonzero(home == s) for s in range(len(self.stations))]

    def station_matrix(self) -> np.ndarray:
        """Station index per (step, vehicle), -1 while away."""
        if self.timeline.station_of is not None:
            return np.array(self.timeline.station_of)
        return np.where(self.timeline.l == 1, self.home_index()[None, :], -1)

    @property
    def strictly_stationary(self) -> bool:
        so = self.timeline.station_of
        if so is None:
            return True
        home = self.home_index()
        present = self.timeline.l == 1
        return bool(np.all(so[present] == np.broadcast_to(home, so.shape)[present]))

    def subset(self, station_ids) -> "Scenario":
        """Scenario restricted to the given stations and their vehicles."""
        keep = [s for s in self.stations if s.id in set(station_ids)]
        kept_ids = {s.id for s in keep}
        cols = [i for i, v in enumerate(self.fleet) if v.home_station_id in kept_ids]
        tl = self.timeline
        if tl.station_of is not None:
            old = self.station_index()
            remap = {old[s.id]: j for j, s in enumerate(keep)}
            so = np.vectorize(lambda k: remap.get(k, -1))(tl.station_of[:, cols]) if cols else None
            tl = replace(tl.restrict(cols), station_of=so)
        else:
            tl = tl.restrict(cols)
        return Scenario([self.fleet[i] for i in cols], keep, tl, self.objectives, dict(self.meta))

    def to_dict(self) -> dict:
        return {"version": 1, "fleet": [v.to_dict() for v in self.fleet],
                "stations": [s.to_dict() for s in self.stations], "timeline": self.timeline.to_dict(),
                "objectives": self.objectives.to_dict(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        obj = ObjectiveConfig.from_dict(d["objectives"]) if "objectives" in d else ObjectiveConfig()
        return cls([VehicleSpec.from_dict(v) for v in d["fleet"]],
                   [StationSpec.from_dict(s) for s in d["stations"]],
                   ScenarioTimeline.from_dict(d["timeline"]), obj, d.get("meta", {}))

    def dumps(self) -> str:
        # json writes floats with repr, which round-trips doubles exactly
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
            fh.write("\n")

    @classmethod
    def loads(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


# -- bookings -------------------------------------------------------------------

def read_bookings_csv(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(BOOKING_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"booking CSV lacks columns {sorted(missing)}")
        for row in reader:
            out.append(BookingRecord(
                row["vehicle_id"],
                datetime.fromisoformat(row["reservation_start"]),
                datetime.fromisoformat(row["reservation_end"]),
                datetime.fromisoformat(row["drive_start"]),
                datetime.fromisoformat(row["drive_end"]),
                float(row["distance_km"]),
                row["cancelled"].strip().lower() in ("1", "true", "yes"),
            ))
    return out


def write_bookings_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BOOKING_COLUMNS)
        for r in records:
            w.writerow([r.vehicle_id, r.reservation_start.isoformat(), r.reservation_end.isoformat(),
                        r.drive_start.isoformat(), r.drive_end.isoformat(), repr(float(r.distance_km)),
                        int(r.cancelled)])


def normalize_bookings(records) -> list:
    """Drop cancelled and drive-less reservations and cut overlaps between consecutive reservations.

    When a vehicle is picked up again before the previous reservation ends,
    the earlier reservation is cut back to the later start, but never before
    its own drive ended, and the later one starts no earlier than that cut.
    The result satisfies ``res_start <= drive_start <= drive_end <= res_end``
    and is a fixed point of this function.
    """
    kept = []
    for r in records:
        if r.cancelled or r.distance_km < 0:
            if r.distance_km < 0:
                raise ValueError(f"negative distance for vehicle {r.vehicle_id}")
            continue
        if r.distance_km == 0 or r.drive_end <= r.drive_start:
            continue
        ds, de = r.drive_start, r.drive_end
        rs, re = min(r.reservation_start, ds), max(r.reservation_end, de)
        kept.append(BookingRecord(r.vehicle_id, rs, re, ds, de, float(r.distance_km), False))
    by_vehicle: dict = {}
    for r in kept:
        by_vehicle.setdefault(r.vehicle_id, []).append(r)
    out = []
    for vid in by_vehicle:
        recs = sorted(by_vehicle[vid], key=lambda r: (r.reservation_start, r.drive_start))
        cur = recs[0]
        for nxt in recs[1:]:
            if nxt.reservation_start < cur.reservation_end:
                cut = max(cur.drive_end, min(cur.reservation_end, nxt.reservation_start))
                cur = replace(cur, reservation_end=cut)
                rs = max(nxt.reservation_start, cut)
                # a drive pushed later keeps its duration
                ds = max(nxt.drive_start, rs)
                de = max(nxt.drive_end, ds + (nxt.drive_end - nxt.drive_start))
                nxt = replace(nxt, reservation_start=rs, drive_start=ds, drive_end=de,
                              reservation_end=max(nxt.reservation_end, de))
            out.append(cur)
            cur = nxt
        out.append(cur)
    return out


def ingest_bookings(records, fleet, dt_h: float, horizon) -> ScenarioTimeline:
    """Turn booking records into the ``l``/``e``/``delta_e`` timeline.

    Parameters
    ----------
    records : list of BookingRecord
    fleet : list of VehicleSpec
        Column order of the timeline.
    dt_h : float
        Step length in hours.
    horizon : (datetime, int)
        Start instant and number of steps.
    """
    start, T = horizon
    T = int(T)
    if T < 1 or not dt_h > 0:
        raise ValueError("horizon needs at least one step and dt_h > 0")
    col = {v.id: i for i, v in enumerate(fleet)}
    for k, r in enumerate(records):
        if r.vehicle_id not in col:
            raise ValueError(f"record {k}: unknown vehicle {r.vehicle_id!r}")
    n_v = len(fleet)
    l = np.ones((T, n_v), dtype=np.int8)
    e = np.zeros((T, n_v))
    de = np.zeros((T, n_v))
    flags = []
    step = timedelta(hours=dt_h)

    # discretize every reservation to [first bin, end bin)
    trips: dict = {}
    for r in normalize_bookings(records):
        a = (r.reservation_start - start) / step
        b = (r.reservation_end - start) / step
        t0, t1 = math.floor(a + 1e-9), math.ceil(b - 1e-9)
        if t1 <= t0:
            t1 = t0 + 1
        if b - a < 1.0 - 1e-9:
            flags.append(f"short_trip:{r.vehicle_id}@{t0}")
        if t1 <= 0 or t0 >= T:
            continue
        trips.setdefault(r.vehicle_id, []).append([t0, t1, r.distance_km])

    for vid, lst in trips.items():
        v = col[vid]
        spec = fleet[v]
        lst.sort()
        merged = [lst[0]]
        for t0, t1, dist in lst[1:]:
            if t0 <= merged[-1][1]:
                # no present step between the two trips: one longer absence
                flags.append(f"merged_trip:{vid}@{t0}")
                merged[-1][1] = max(merged[-1][1], t1)
                merged[-1][2] += dist
            else:
                merged.append([t0, t1, dist])
        for t0, t1, dist in merged:
            l[max(t0, 0):min(t1, T), v] = 0
            if t0 < 1:
                continue
            need = dist * spec.consumption_kwh_per_km
            if need > spec.capacity_kwh:
                warnings.warn(f"vehicle {vid}: trip energy {need:.2f} kWh exceeds capacity, clamped",
                              stacklevel=2)
                flags.append(f"clamped_trip:{vid}@{t0}")
                need = spec.capacity_kwh
            e[t0, v] = need
            if t1 < T:
                de[t1, v] = need
    return ScenarioTimeline(dt_h, T, l, sp.csc_matrix(e), sp.csc_matrix(de), start.hour + start.minute / 60.0,
                            None, tuple(flags))


def timeline_problems(tl: ScenarioTimeline, fleet=None) -> list:
    """Structural checks of a timeline; an empty list means it is consistent."""
    out = []
    l = tl.l.astype(int)
    e = tl.e_dense()
    de = tl.delta_e_dense()
    for v in range(tl.n_v):
        open_need = None
        for t in range(tl.T):
            dep = t >= 1 and l[t - 1, v] == 1 and l[t, v] == 0
            arr = t >= 1 and l[t - 1, v] == 0 and l[t, v] == 1
            if e[t, v] > 0 and not dep:
                out.append(f"vehicle {v}: requirement at non-departure step {t}")
            if de[t, v] > 0 and not arr:
                out.append(f"vehicle {v}: trip loss at non-arrival step {t}")
            if dep:
                open_need = e[t, v]
            if arr:
                if open_need is not None and de[t, v] != open_need:
                    out.append(f"vehicle {v}: loss {de[t, v]} at step {t} does not match departure need {open_need}")
                if open_need is None and de[t, v] > 0:
                    out.append(f"vehicle {v}: loss at step {t} without a departure")
                open_need = None
        if fleet is not None and np.any(de[:, v] > fleet[v].capacity_kwh):
            out.append(f"vehicle {v}: trip loss above capacity")
    return out


# -- synthetic generation -----------------------------------------------------------

def _profile_at(profile: np.ndarray, hours: np.ndarray) -> np.ndarray:
    """Periodic linear interpolation of an hourly 24-value table."""
    h = np.asarray(hours, dtype=float) % 24.0
    return np.interp(h, np.arange(25), np.r_[profile, profile[0]])


def clear_sky(hours) -> np.ndarray:
    return _profile_at(CLEAR_SKY, hours)


def tariff_series(name: str, hours) -> tuple:
    if name not in TARIFFS:
        raise ValueError(f"unknown tariff preset {name!r}; choose from {sorted(TARIFFS)}")
    t = TARIFFS[name]
    hrs = np.floor(np.asarray(hours, dtype=float)) % 24
    return (np.array([t["buy"](h) for h in hrs]), np.array([t["sell"](h) for h in hrs]))


def _draw_distance(rng, limit_km: float, median_km=25.0, sigma=0.9) -> float:
    for _ in range(100):
        d = float(rng.lognormal(math.log(median_km), sigma))
        if d <= limit_km:
            return d
    return float(limit_km)


def synthesize_bookings(fleet, start: datetime, T: int, dt_h: float, rng, usage_profile,
                        mean_duration_h=3.0, burn_in_h=24.0) -> list:
    """Two-state (present/reserved) Markov chain per vehicle.

    Reservations last a geometric number of steps with mean ``mean_duration_h``.
    The pick-up probability ``p / (D (1 - p))`` makes the stationary reserved
    fraction equal the hourly usage probability ``p``. The chain runs a
    burn-in period before ``start`` so the first step is already in balance.
    """
    D = max(mean_duration_h / dt_h, 1.0)
    p_end = 1.0 / D
    n_burn = int(round(burn_in_h / dt_h))
    n = n_burn + T
    t0 = start - timedelta(hours=n_burn * dt_h)
    hours = (t0.hour + t0.minute / 60.0 + (np.arange(n) + 0.5) * dt_h) % 24.0
    p = np.clip(_profile_at(np.asarray(usage_profile, dtype=float), hours), 0.0, 0.999)
    lam = np.minimum(p / (D * (1.0 - p)), 1.0)
    step = timedelta(hours=dt_h)
    records = []
    for v in fleet:
        u_start = rng.random(n)
        u_end = rng.random(n)
        away = False
        begin = 0
        for k in range(n):
            if not away and u_start[k] < lam[k]:
                away, begin = True, k
            elif away and u_end[k] < p_end:
                away = False
                records.append((v, begin, k))
        if away:
            records.append((v, begin, n + int(rng.geometric(p_end))))
    out = []
    for v, b, k in records:
        rs = t0 + b * step
        re = t0 + k * step
        dist = _draw_distance(rng, v.range_km * (1.0 - v.min_soc_kwh / v.capacity_kwh))
        out.append(BookingRecord(v.id, rs, re, rs, re, dist, False))
    return out


def generate_fleet(n_stations: int, vehicles_per_station: int, rng) -> list:
    names = [c[0] for c in VEHICLE_CATALOG]
    probs = np.array([c[3] for c in VEHICLE_CATALOG])
    fleet = []
    for s in range(n_stations):
        for j in range(vehicles_per_station):
            k = int(rng.choice(len(names), p=probs / probs.sum()))
            _, cap, cons, _ = VEHICLE_CATALOG[k]
            x0 = float(rng.uniform(0.5, 0.9)) * cap
            fleet.append(VehicleSpec(f"v{s}_{j}", cap, 0.1 * cap, x0, 11.0, 11.0, 0.92, 0.92, 24000.0, cons,
                                     f"s{s}"))
    return fleet


def generate_stations(n_stations: int, vehicles_per_station: int, T: int, dt_h: float, rng,
                      start_hour: float = 0.0, tariff="flat", charger_kw: float = 11.0) -> list:
    hours = (start_hour + np.arange(T) * dt_h) % 24.0
    stations = []
    for s in range(n_stations):
        name = tariff if isinstance(tariff, str) else tariff[s % len(tariff)]
        buy, sell = tariff_series(name, hours)
        level = float(rng.uniform(2.0, 6.0))
        shape = 1.0 + 0.5 * np.sin(2 * np.pi * (hours - 8.0) / 24.0)
        base = level * shape * (1.0 + 0.1 * rng.standard_normal(T)).clip(0.5, 1.5)
        p_max = vehicles_per_station * charger_kw + float(base.max()) + 5.0
        stations.append(StationSpec(f"s{s}", vehicles_per_station, p_max, base, np.zeros(T), buy, sell))
    return stations


def generate_scenario(n_stations: int, vehicles_per_station: int, T: int, dt_h: float = 0.25, seed: int = 0,
                      usage_profile=None, start: datetime | None = None, tariff="flat"):
    """Synthetic strictly-stationary fleet.

    Returns
    -------
    fleet, stations, timeline
    """
    if T < 2:
        raise ValueError("horizon must have at least 2 steps")
    if n_stations < 1 or vehicles_per_station < 1:
        raise ValueError("station and vehicle counts must be positive")
    usage = DEFAULT_USAGE_PROFILE if usage_profile is None else np.asarray(usage_profile, dtype=float)
    if usage.size != 24 or np.any(usage < 0) or np.any(usage >= 1):
        raise ValueError("usage_profile must hold 24 probabilities in [0, 1)")
    start = start or datetime(2024, 1, 1)
    rng = np.random.default_rng(seed)
    fleet = generate_fleet(n_stations, vehicles_per_station, rng)
    stations = generate_stations(n_stations, vehicles_per_station, T, dt_h, rng,
                                 start.hour + start.minute / 60.0, tariff)
    records = synthesize_bookings(fleet, start, T, dt_h, rng, usage)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        timeline = ingest_bookings(records, fleet, dt_h, (start, T))
    return fleet, stations, timeline


def make_scenario(n_stations, vehicles_per_station, T, dt_h=0.25, seed=0, objectives=None, pv_kw_per_charger=0.0,
                  pv_probability=0.5, **kw) -> Scenario:
    """:func:`generate_scenario` plus optional PV, bundled as a :class:`Scenario`."""
    fleet, stations, tl = generate_scenario(n_stations, vehicles_per_station, T, dt_h, seed, **kw)
    if pv_kw_per_charger > 0:
        stations = assign_pv(stations, pv_kw_per_charger, seed, probability=pv_probability, dt_h=dt_h,
                             start_hour=tl.start_hour)
    meta = {"generator": {"n_stations": n_stations, "vehicles_per_station": vehicles_per_station, "T": T,
                          "dt_h": dt_h, "seed": seed, "pv_kw_per_charger": pv_kw_per_charger}}
    return Scenario(fleet, stations, tl, objectives or ObjectiveConfig(), meta)


def assign_pv(stations, power_per_charger_kw: float, seed: int, probability: float = 0.5, dt_h: float = 0.25,
              start_hour: float = 0.0) -> list:
    """Give a random subset of stations a clear-sky PV series of ``n_max_chargers * power_per_charger_kw`` peak."""
    if power_per_charger_kw < 0:
        raise ValueError("power_per_charger_kw must be non-negative")
    rng = np.random.default_rng(seed)
    pick = rng.random(len(stations)) < probability
    out = []
    for s, chosen in zip(stations, pick):
        if chosen:
            hours = start_hour + np.arange(s.T) * dt_h
            pv = s.n_max_chargers * power_per_charger_kw * clear_sky(hours)
            out.append(replace(s, pv_kw=pv))
        else:
            out.append(s)
    return out
