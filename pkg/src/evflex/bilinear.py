"""Iterative handling of the complementarity constraint ``u_c * u_d = 0``.

Both schemes wrap a convex subproblem solver (the *hook*) that accepts an
extra separable quadratic penalty on the stacked controls ``z = [x; y]``
(``x`` charge, ``y`` discharge, one pair per vehicle-step):

    0.5 * (h_cc x^2 + 2 h_cd x y + h_dd y^2) + g_c x + g_d y      (elementwise)

and returns the new ``z`` plus an opaque primal vector that is blended along
with ``z`` when damping is active.

Taylor relaxation
    Auxiliary ``w ~ x * y`` shrunk towards zero by ``gamma_b / 2 ||w||^2``.
    The product is replaced by its first-order expansion around the previous
    iterate, so the ``z`` step stays a QP:

        z <- argmin f(z) + rho_b / 2 || w + lam - c(z, z^k) ||^2
        w <- rho_b / (rho_b + gamma_b) (c(z^{k+1}, z^k) - lam)
        lam <- lam + w - c(z^{k+1}, z^k)
        z <- alpha z + (1 - alpha) z^k

Wang relaxation
    Plain ADMM between ``f`` and the indicator of the complementarity set:

        z <- argmin f(z) + rho_b / 2 || z - zt + lam ||^2
        zt <- proj(z + lam)
        lam <- lam + z - zt
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("taylor", "wang")
TAYLOR_VARIANTS = ("linearized", "printed")


def taylor_linearization(x_prev, y_prev, x_cur, y_cur) -> np.ndarray:
    """First-order expansion of ``x * y`` around ``(x_prev, y_prev)`` evaluated at ``(x_cur, y_cur)``."""
    x_prev = np.asarray(x_prev, dtype=float)
    y_prev = np.asarray(y_prev, dtype=float)
    return x_prev * y_prev + x_prev * (np.asarray(y_cur) - y_prev) + y_prev * (np.asarray(x_cur) - x_prev)


def wang_projection(a, b) -> tuple:
    """Project pairs onto ``{a >= 0, b >= 0, a * b = 0}``.

    The larger coordinate survives (clamped at zero), the other is zeroed;
    ties zero ``b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    keep_a = a >= b
    return np.where(keep_a, np.maximum(a, 0.0), 0.0), np.where(keep_a, 0.0, np.maximum(b, 0.0))


def complementarity(z: np.ndarray) -> float:
    x, y = split(z)
    return float(np.max(x * y, initial=0.0))


def split(z: np.ndarray) -> tuple:
    h = z.size // 2
    return z[:h], z[h:]


@dataclass
class RelaxationState:
    mode: str
    n: int
    rho_b: float = 1.0
    gamma_b: float = 1.0
    alpha: float = 1.0
    variant: str = "linearized"
    z_prev: np.ndarray = None
    z_cur: np.ndarray = None
    w: np.ndarray = None
    zt: np.ndarray = None
    lam: np.ndarray = None
    primal: np.ndarray | None = None
    k: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in TAYLOR_VARIANTS:
            raise ValueError(f"variant must be one of {TAYLOR_VARIANTS}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.rho_b <= 0 or self.gamma_b < 0:
            raise ValueError("need rho_b > 0 and gamma_b >= 0")
        for name, size in (("z_prev", 2 * self.n), ("z_cur", 2 * self.n), ("zt", 2 * self.n),
                           ("w", self.n), ("lam", 2 * self.n if self.mode == "wang" else self.n)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(size))

    @classmethod
    def initial(cls, mode, n, rho_b=1.0, gamma_b=1.0, alpha=1.0, variant="linearized", seed=None):
        """Zero start, or a non-negative random start when ``seed`` is given."""
        st = cls(mode, n, rho_b, gamma_b, alpha, variant)
        if seed is not None:
            rng = np.random.default_rng(seed)
            st.z_cur = rng.random(2 * n)
            st.z_prev = st.z_cur.copy()
            if mode == "wang":
                st.zt = np.concatenate(wang_projection(*split(st.z_cur)))
                st.lam = 0.1 * rng.standard_normal(2 * n)
            else:
                st.w = rng.random(n)
                st.lam = 0.1 * rng.standard_normal(n)
        return st

    def copy(self) -> "RelaxationState":
        return RelaxationState(self.mode, self.n, self.rho_b, self.gamma_b, self.alpha, self.variant,
                               self.z_prev.copy(), self.z_cur.copy(), self.w.copy(), self.zt.copy(),
                               self.lam.copy(), None if self.primal is None else self.primal.copy(), self.k,
                               list(self.history))


def taylor_penalty(state: RelaxationState) -> tuple:
    """Quadratic terms ``(h_cc, h_cd, h_dd, g)`` of the Taylor ``z`` step, ``g = [g_c; g_d]``."""
    xk, yk = split(state.z_cur)
    rb = state.rho_b
    if state.variant == "printed":
        # rho_b/2 (||x - c + lam||^2 + ||y - c + lam||^2) with c the previous expansion
        xp, yp = split(state.z_prev)
        c = taylor_linearization(xp, yp, xk, yk)
        target = c - state.lam
        h = np.full(state.n, rb)
        return h, np.zeros(state.n), h, np.concatenate([-rb * target, -rb * target])
    # rho_b/2 || yk x + xk y - v ||^2,  v = w + lam + xk yk
    v = state.w + state.lam + xk * yk
    return rb * yk * yk, rb * xk * yk, rb * xk * xk, np.concatenate([-rb * yk * v, -rb * xk * v])


def wang_penalty(state: RelaxationState) -> tuple:
    rb = state.rho_b
    h = np.full(state.n, rb)
    return h, np.zeros(state.n), h, -rb * (state.zt - state.lam)


def penalty(state: RelaxationState) -> tuple:
    return taylor_penalty(state) if state.mode == "taylor" else wang_penalty(state)


def penalty_value(state: RelaxationState, z: np.ndarray) -> float:
    """Value of the penalty returned by :func:`penalty` at ``z``, constants included."""
    x, y = split(z)
    if state.mode == "wang":
        return 0.5 * state.rho_b * float(np.sum((z - state.zt + state.lam) ** 2))
    xk, yk = split(state.z_cur)
    if state.variant == "printed":
        xp, yp = split(state.z_prev)
        c = taylor_linearization(xp, yp, xk, yk)
        return 0.5 * state.rho_b * float(np.sum((x - c + state.lam) ** 2 + (y - c + state.lam) ** 2))
    return 0.5 * state.rho_b * float(np.sum((state.w + state.lam - taylor_linearization(xk, yk, x, y)) ** 2))


def advance(state: RelaxationState, z_new: np.ndarray, primal_new=None) -> RelaxationState:
    """Apply the post-solve updates of one pass given the hook's minimizer ``z_new``."""
    z_new = np.asarray(z_new, dtype=float)
    st = state
    if st.mode == "taylor":
        xk, yk = split(st.z_cur)
        xn, yn = split(z_new)
        c = taylor_linearization(xk, yk, xn, yn)
        w = st.rho_b / (st.rho_b + st.gamma_b) * (c - st.lam)
        lam = st.lam + w - c
        a = st.alpha
        z_next = a * z_new + (1.0 - a) * st.z_cur
        if primal_new is not None and st.primal is not None and a < 1.0:
            primal = a * np.asarray(primal_new) + (1.0 - a) * st.primal
        else:
            primal = primal_new
        new = RelaxationState(st.mode, st.n, st.rho_b, st.gamma_b, st.alpha, st.variant,
                              st.z_cur.copy(), z_next, w, st.zt.copy(), lam, primal, st.k + 1, st.history)
        new.history.append({"complementarity": complementarity(z_next), "w_norm": float(np.linalg.norm(w))})
        return new
    zt = np.concatenate(wang_projection(*split(z_new + st.lam)))
    lam = st.lam + z_new - zt
    a = st.alpha
    z_next = a * z_new + (1.0 - a) * st.z_cur
    primal = primal_new if (a == 1.0 or st.primal is None or primal_new is None) \
        else a * np.asarray(primal_new) + (1.0 - a) * st.primal
    new = RelaxationState(st.mode, st.n, st.rho_b, st.gamma_b, st.alpha, st.variant,
                          st.z_cur.copy(), z_next, st.w.copy(), zt, lam, primal, st.k + 1, st.history)
    new.history.append({"complementarity": complementarity(z_next), "projected_complementarity":
                        complementarity(zt), "gap": float(np.max(np.abs(z_new - zt), initial=0.0))})
    return new


def _iterate(state: RelaxationState, hook) -> RelaxationState:
    h_cc, h_cd, h_dd, g = penalty(state)
    z, primal = hook(h_cc, h_cd, h_dd, g)
    return advance(state, z, primal)


def taylor_iterate(state: RelaxationState, hook) -> RelaxationState:
    """One Taylor pass; ``hook(h_cc, h_cd, h_dd, g) -> (z, primal)`` solves the penalized subproblem."""
    if state.mode != "taylor":
        raise ValueError("state is not a Taylor relaxation")
    return _iterate(state, hook)


def wang_iterate(state: RelaxationState, hook) -> RelaxationState:
    """One Wang pass; ``zt`` of the returned state is exactly complementary."""
    if state.mode != "wang":
        raise ValueError("state is not a Wang relaxation")
    return _iterate(state, hook)


def iterate(state: RelaxationState, hook) -> RelaxationState:
    return _iterate(state, hook)


def relaxation_residual(state: RelaxationState) -> float:
    """Taylor: largest ``x * y`` of the current iterate. Wang: largest gap between ``z`` and its projection."""
    if state.mode == "taylor":
        return complementarity(state.z_cur)
    return float(np.max(np.abs(state.z_cur - state.zt), initial=0.0))


def compute_jc(F: float, Q: float, gamma: float, u, u_prev) -> float:
    """Comparison objective: cost plus SOC penalty plus the damping term, no augmented-Lagrangian terms."""
    du = np.asarray(u, dtype=float) - np.asarray(u_prev, dtype=float)
    return float(F + Q + 0.5 * gamma * du @ du)


def jc_of_schedule(schedule, gamma: float = 0.0, u_prev=None, scale: float = 1.0) -> float:
    """J_c of a :class:`~evflex.monolithic.FleetSchedule`; controls are divided by ``scale`` in the damping term."""
    c = schedule.costs
    F = float(sum(c["station"]) + c["system"])
    u = schedule.controls() / scale
    up = u if u_prev is None else np.asarray(u_prev) / scale
    return compute_jc(F, c["soc_penalty"], gamma, u, up)
