"""Exact zero-order-hold discretization of the scalar battery model.

Continuous model, per vehicle::

    dx/dt = A_c x + eta_ch u_c - u_d / eta_ds,    A_c = -1 / tau_sd

Holding the inputs constant over a step of length ``dt`` gives::

    x[t+1] = a x[t] + b_ch u_c[t] - b_ds u_d[t] - delta_e[t]

with ``a = exp(A_c dt)`` and ``b = (a - 1) / A_c * B_c``. ``delta_e`` is the
trip energy re-applied at arrival steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiscreteDynamics:
    a: float
    b_ch: float
    b_ds: float
    dt_h: float

    def __post_init__(self):
        if not (0.0 < self.a <= 1.0):
            raise ValueError(f"decay coefficient must lie in (0, 1], got {self.a}")
        if self.b_ch <= 0 or self.b_ds <= 0:
            raise ValueError("input gains must be positive")


def discretize(spec, dt_h: float) -> DiscreteDynamics:
    """Discretize the battery of ``spec`` (a VehicleSpec) with step ``dt_h`` hours.

    An infinite self-discharge time constant is the ``A_c -> 0`` limit, where
    the input gain reduces to ``dt_h * B_c``.
    """
    if dt_h <= 0:
        raise ValueError("dt_h must be positive")
    eta_ch, eta_ds, tau = spec.eta_ch, spec.eta_ds, spec.tau_sd_h
    if not (0.0 < eta_ch <= 1.0) or not (0.0 < eta_ds <= 1.0):
        raise ValueError(f"efficiencies must lie in (0, 1], got {eta_ch}, {eta_ds}")
    if tau is None or math.isinf(tau):
        a = 1.0
        gain = dt_h
    else:
        if tau <= 0:
            raise ValueError("tau_sd_h must be positive")
        a = math.exp(-dt_h / tau)
        # (a - 1) / A_c with A_c = -1/tau, written with expm1 to keep precision for large tau
        gain = -tau * math.expm1(-dt_h / tau)
    return DiscreteDynamics(a, gain * eta_ch, gain / eta_ds, dt_h)


def propagate(x_t, dyn: DiscreteDynamics, u_c, u_d, delta_e=0.0):
    """One step of the discrete battery model (kWh in, kWh out)."""
    return dyn.a * x_t + dyn.b_ch * u_c - dyn.b_ds * u_d - delta_e


def simulate(x0: float, dyn: DiscreteDynamics, u_c, u_d, delta_e=None) -> np.ndarray:
    """Roll :func:`propagate` over a horizon; returns the T+1 state trajectory."""
    u_c = np.asarray(u_c, dtype=float)
    u_d = np.zeros_like(u_c) if u_d is None else np.asarray(u_d, dtype=float)
    de = np.zeros_like(u_c) if delta_e is None else np.asarray(delta_e, dtype=float)
    x = np.empty(u_c.size + 1)
    x[0] = x0
    for t in range(u_c.size):
        x[t + 1] = propagate(x[t], dyn, u_c[t], u_d[t], de[t])
    return x

