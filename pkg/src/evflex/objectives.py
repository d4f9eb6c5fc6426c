"""Station-level and fleet-level cost terms.

Every term exists twice: a ``build_*`` function that emits it into a
:class:`~evflex.qp.QpBuilder` (with epigraph or slack variables where the
term is not smooth) and a plain numpy evaluator used to score schedules
independently of any solver variables.

Units: powers in kW, prices in currency/kWh except the flexibility price,
which is currency/MWh. Energy terms are priced on ``power * dt_h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import QpBuilder

STATION_KINDS = ("energy_cost", "self_consumption", "fast_charge", "peak_shave", "none")
SYSTEM_KINDS = ("track_profile", "intraday_cost", "flex_linear", "none")
DEFAULT_SOC_WEIGHT = 1e4


def _arr(v):
    return None if v is None else np.asarray(v, dtype=float)


@dataclass
class ObjectiveSpec:
    kind: str
    weight: float = 1.0
    reference: np.ndarray | None = None
    discount: np.ndarray | None = None
    reverse: bool = False
    flex_price: float = 0.0
    steps: tuple = ()
    buy_price: np.ndarray | None = None
    sell_price: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in STATION_KINDS + SYSTEM_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        self.reference = _arr(self.reference)
        self.discount = _arr(self.discount)
        self.buy_price = _arr(self.buy_price)
        self.sell_price = _arr(self.sell_price)
        self.steps = tuple(int(s) for s in self.steps)
        if self.weight < 0:
            raise ValueError("objective weight must be non-negative")
        if self.flex_price < 0:
            raise ValueError("flexibility price must be non-negative")
        if self.discount is not None:
            d = self.discount
            if np.any(d < 0):
                raise ValueError("discount weights must be non-negative")
            if not (np.all(np.diff(d) >= 0) or np.all(np.diff(d) <= 0)):
                raise ValueError("discount weights must be monotone in time")

    @property
    def is_system(self) -> bool:
        return self.kind in SYSTEM_KINDS and self.kind != "none"

    def check_length(self, T: int):
        for name in ("reference", "discount", "buy_price", "sell_price"):
            v = getattr(self, name)
            if v is not None and v.size != T:
                raise ValueError(f"{self.kind}: {name} has length {v.size}, expected {T}")
        if any(s < 0 or s >= T for s in self.steps):
            raise ValueError(f"{self.kind}: step index outside horizon")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "weight": self.weight}
        for name in ("reference", "discount", "buy_price", "sell_price"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.tolist()
        if self.reverse:
            out["reverse"] = True
        if self.kind == "flex_linear":
            out["flex_price"] = self.flex_price
            out["steps"] = list(self.steps)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(**d)


@dataclass
class ObjectiveConfig:
    """Station cost ``C`` (applied at every station), fleet cost ``S`` and the SOC penalty weight ``k``."""

    station: list = field(default_factory=lambda: [ObjectiveSpec("energy_cost")])
    system: list = field(default_factory=list)
    soc_weight: float = DEFAULT_SOC_WEIGHT

    def __post_init__(self):
        if self.soc_weight <= 0:
            raise ValueError("soc_weight must be positive")
        for s in self.station:
            if s.kind not in STATION_KINDS:
                raise ValueError(f"{s.kind!r} is not a station-level objective")
        for s in self.system:
            if s.kind not in SYSTEM_KINDS:
                raise ValueError(f"{s.kind!r} is not a system-level objective")

    @property
    def active_system(self) -> list:
        return [s for s in self.system if s.kind != "none"]

    def with_system(self, system: list) -> "ObjectiveConfig":
        return ObjectiveConfig(list(self.station), list(system), self.soc_weight)

    def to_dict(self) -> dict:
        return {"station": [s.to_dict() for s in self.station],
                "system": [s.to_dict() for s in self.system],
                "soc_weight": self.soc_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        return cls([ObjectiveSpec.from_dict(s) for s in d.get("station", [])],
                   [ObjectiveSpec.from_dict(s) for s in d.get("system", [])],
                   d.get("soc_weight", DEFAULT_SOC_WEIGHT))


def default_discount(T: int, reverse: bool = False) -> np.ndarray:
    """Lateness weight ``d(t) = t / T``; ``reverse`` makes early steps costly instead."""
    d = np.arange(T) / T
    return d[::-1].copy() if reverse else d


# -- evaluators ----------------------------------------------------------------

def energy_cost(p, buy, sell, dt_h) -> float:
    p = np.asarray(p, dtype=float)
    return float(np.sum(np.maximum(buy * p, sell * p)) * dt_h)


def soft_soc_penalty(x, threshold, k) -> float:
    th = np.asarray(threshold, dtype=float)
    mask = np.isfinite(th)
    short = np.maximum(th[mask] - np.asarray(x, dtype=float)[mask], 0.0)
    return float(k * np.sum(short**2))


def self_consumption(p) -> float:
    return float(np.sum(p))


def fast_charge(p, discount) -> float:
    return float(np.sum(np.asarray(p) * discount))


def peak_shave(p) -> float:
    return float(np.sum(np.square(p)))


def tracking(agg, reference) -> float:
    return float(np.sum(np.square(np.asarray(agg) - reference)))


def flex_linear(agg, reference, flex_price, steps, dt_h) -> float:
    """Flexibility penalty: ``p_f * |r - sum_s p_s|`` summed as energy (MWh) over the hour set."""
    steps = np.asarray(steps, dtype=int)
    if steps.size == 0:
        return 0.0
    dev = np.abs(np.asarray(reference)[steps] - np.asarray(agg)[steps])
    return float(flex_price * np.sum(dev) * dt_h / 1000.0)


def station_term(spec: ObjectiveSpec, p, station, dt_h) -> float:
    T = len(p)
    if spec.kind == "energy_cost":
        return spec.weight * energy_cost(p, station.buy_price, station.sell_price, dt_h)
    if spec.kind == "self_consumption":
        return spec.weight * self_consumption(p)
    if spec.kind == "fast_charge":
        d = spec.discount if spec.discount is not None else default_discount(T, spec.reverse)
        return spec.weight * fast_charge(p, d)
    if spec.kind == "peak_shave":
        return spec.weight * peak_shave(p)
    return 0.0


def system_term(spec: ObjectiveSpec, agg, dt_h) -> float:
    if spec.kind == "track_profile":
        return spec.weight * tracking(agg, spec.reference)
    if spec.kind == "intraday_cost":
        return spec.weight * energy_cost(agg, spec.buy_price, spec.sell_price, dt_h)
    if spec.kind == "flex_linear":
        return spec.weight * flex_linear(agg, spec.reference, spec.flex_price, spec.steps, dt_h)
    return 0.0


# -- builders -------------------------------------------------------------------

def _check_prices(buy, sell):
    buy = np.asarray(buy, dtype=float)
    sell = np.asarray(sell, dtype=float)
    if np.any(sell > buy + 1e-12):
        t = int(np.flatnonzero(sell > buy)[0])
        raise ValueError(f"sell price exceeds buy price at step {t}; the epigraph form needs p_sell <= p_buy")
    return buy, sell


def build_energy_cost(b: QpBuilder, p_idx, buy, sell, dt_h, weight=1.0, name="y") -> np.ndarray:
    """Epigraph of ``max(p_buy p, p_sell p)``: ``y >= p_buy p``, ``y >= p_sell p``, cost ``sum y dt``."""
    buy, sell = _check_prices(buy, sell)
    T = len(p_idx)
    y = b.add_var(name, T)
    r = np.arange(T)
    b.add_rows(np.r_[r, r], np.r_[y, p_idx], np.r_[np.ones(T), -buy], 0.0, np.inf)
    b.add_rows(np.r_[r, r], np.r_[y, p_idx], np.r_[np.ones(T), -sell], 0.0, np.inf)
    b.add_linear(y, weight * dt_h)
    return y


def build_soft_soc_penalty(b: QpBuilder, x_idx, threshold, k, name="s") -> np.ndarray:
    """Slack ``s >= max(threshold - x, 0)`` with cost ``k * s^2``; ``-inf`` thresholds are skipped."""
    if k <= 0:
        raise ValueError("penalty weight k must be positive")
    th = np.asarray(threshold, dtype=float)
    keep = np.isfinite(th)
    xi = np.asarray(x_idx)[keep]
    n = xi.size
    s = b.add_var(name, n, lb=0.0)
    if n:
        r = np.arange(n)
        b.add_rows(np.r_[r, r], np.r_[s, xi], np.ones(2 * n), th[keep], np.inf)
        b.add_square(s, k)
    return s


def build_self_consumption(b: QpBuilder, p_idx, weight=1.0) -> None:
    b.add_linear(p_idx, weight)


def build_fast_charge(b: QpBuilder, p_idx, discount, weight=1.0) -> None:
    b.add_linear(p_idx, weight * np.asarray(discount, dtype=float))


def build_peak_shave(b: QpBuilder, p_idx, weight=1.0) -> None:
    b.add_square(p_idx, weight)


def build_tracking(b: QpBuilder, agg_idx, reference, weight=1.0) -> None:
    b.add_square(agg_idx, weight, reference)


def build_flex_linear(b: QpBuilder, agg_idx, reference, flex_price, steps, dt_h, weight=1.0, name="flex"):
    """``p_f * sum_{t in steps} |r_t - agg_t| * dt / 1000`` via two non-negative slacks per step."""
    steps = np.asarray(steps, dtype=int)
    n = steps.size
    dp = b.add_var(name + "+", n, lb=0.0)
    dm = b.add_var(name + "-", n, lb=0.0)
    if n:
        r = np.arange(n)
        # agg - r = d+ - d-
        b.add_rows(np.r_[r, r, r], np.r_[np.asarray(agg_idx)[steps], dp, dm],
                   np.r_[np.ones(n), -np.ones(n), np.ones(n)],
                   np.asarray(reference, dtype=float)[steps], np.asarray(reference, dtype=float)[steps])
        c = weight * flex_price * dt_h / 1000.0
        b.add_linear(dp, c)
        b.add_linear(dm, c)
    return dp, dm


def build_station_objectives(b: QpBuilder, specs, p_idx, station, dt_h, tag="") -> None:
    T = len(p_idx)
    for k, spec in enumerate(specs):
        spec.check_length(T)
        if spec.kind == "energy_cost":
            build_energy_cost(b, p_idx, station.buy_price, station.sell_price, dt_h, spec.weight, name=f"y[{tag}]#{k}")
        elif spec.kind == "self_consumption":
            build_self_consumption(b, p_idx, spec.weight)
        elif spec.kind == "fast_charge":
            d = spec.discount if spec.discount is not None else default_discount(T, spec.reverse)
            build_fast_charge(b, p_idx, d, spec.weight)
        elif spec.kind == "peak_shave":
            build_peak_shave(b, p_idx, spec.weight)


def build_system_objectives(b: QpBuilder, specs, agg_idx, dt_h) -> None:
    T = len(agg_idx)
    for k, spec in enumerate(specs):
        spec.check_length(T)
        if spec.kind == "track_profile":
            build_tracking(b, agg_idx, spec.reference, spec.weight)
        elif spec.kind == "intraday_cost":
            build_energy_cost(b, agg_idx, spec.buy_price, spec.sell_price, dt_h, spec.weight, name=f"y_sys#{k}")
        elif spec.kind == "flex_linear":
            build_flex_linear(b, agg_idx, spec.reference, spec.flex_price, spec.steps, dt_h, spec.weight,
                              name=f"flex#{k}")
