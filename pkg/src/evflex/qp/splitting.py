"""First-order operator-splitting QP solver.

The iteration follows the OSQP scheme (Stellato et al., 2020): a
quasi-definite KKT system is factorized once per penalty value and reused
for every iteration, constraints are split from the cost through a slack
copy ``z = Ax`` and the update is over-relaxed. Solutions are refined by
an active-set polishing step, which is what makes the solver accurate
enough to serve as the bounding engine of branch-and-bound.

The workspace keeps its factorization and last iterate between calls, so
re-solving after :meth:`SplittingSolver.update` with a new ``q`` (the
common case inside decomposition loops) costs only a handful of
iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import QpProblem

log = logging.getLogger(__name__)

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_FACTOR = 1e3
BIG = 1e19


@dataclass
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 10000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    scaling: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 5
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine_iter: int = 50
    polish_rounds: int = 25
    # try polishing every this many iterations once residuals are within polish_window of the target
    polish_every: int = 50
    polish_first: int = 10
    polish_window: float = 1e4
    polish_force_every: int = 250


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    obj: float
    status: str
    prim_res: float
    dual_res: float
    iterations: int
    polished: bool = False
    # populated by branch-and-bound
    gap: float = 0.0
    bound: float = -np.inf
    nodes: int = 0

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "max_iter")


def _inf_norm_cols(M: sp.csc_matrix) -> np.ndarray:
    if M.nnz == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _inf_norm_rows(M: sp.csc_matrix) -> np.ndarray:
    if M.nnz == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _limit(v, lo=1e-4, hi=1e4):
    v = np.where(v < lo, 1.0, v)
    return np.minimum(v, hi)


class SplittingSolver:
    """Reusable solver workspace for one QP structure."""

    def __init__(self, problem: QpProblem, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self.n = problem.n
        self.m = problem.m
        self.P = problem.P.tocsc()
        self.q = problem.q.copy()
        self.A = problem.A.tocsc()
        self.l = np.clip(problem.l, -BIG, BIG)
        self.u = np.clip(problem.u, -BIG, BIG)
        self.offset = problem.offset
        self._scale()
        self._set_rho_vec(self.settings.rho)
        self._factor()
        self.x = np.zeros(self.n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)
        self.n_factor = 1

    # -- setup -------------------------------------------------------------
    def _scale(self):
        n, m = self.n, self.m
        D = np.ones(n)
        E = np.ones(m)
        P, A, q = self.P.copy(), self.A.copy(), self.q.copy()
        for _ in range(self.settings.scaling):
            colP = _inf_norm_cols(P)
            colA = _inf_norm_cols(A) if m else np.zeros(n)
            d = 1.0 / np.sqrt(_limit(np.maximum(colP, colA)))
            e = 1.0 / np.sqrt(_limit(_inf_norm_rows(A))) if m else np.ones(0)
            Dd = sp.diags(d)
            P = (Dd @ P @ Dd).tocsc()
            A = (sp.diags(e) @ A @ Dd).tocsc()
            q = d * q
            D *= d
            E *= e
        # cost scaling once, after equilibration: inside the loop it feeds back
        # into the column norms and can drift without bound when q = 0
        mean_col = np.mean(_inf_norm_cols(P)) if n else 0.0
        c = 1.0 / _limit(np.array([max(mean_col, np.max(np.abs(q), initial=0.0))]))[0]
        P = P * c
        q = q * c
        self.D, self.E, self.c = D, E, c
        self.Ps, self.As, self.qs = P.tocsc(), A.tocsc(), q
        # transposes cached for the per-iteration residuals
        self.At = self.A.T.tocsr()
        self.AsT = self.As.T.tocsr()
        self.ls = np.where(self.l <= -BIG, -BIG, E * self.l)
        self.us = np.where(self.u >= BIG, BIG, E * self.u)

    def _set_rho_vec(self, rho: float):
        self.rho = float(np.clip(rho, RHO_MIN, RHO_MAX))
        # row types are fixed at setup so bound updates keep the factorization
        if not hasattr(self, "_row_type"):
            free = (self.l <= -BIG) & (self.u >= BIG)
            eq = np.abs(self.u - self.l) < 1e-4 * np.maximum(1.0, np.abs(self.l))
            self._row_type = np.where(free, 0, np.where(eq, 2, 1))
        rv = np.full(self.m, self.rho)
        rv[self._row_type == 0] = RHO_MIN
        rv[self._row_type == 2] = RHO_EQ_FACTOR * self.rho
        self.rho_vec = rv

    def _factor(self):
        n, m = self.n, self.m
        K = sp.bmat([[self.Ps + self.settings.sigma * sp.identity(n), self.As.T],
                     [self.As, sp.diags(-1.0 / self.rho_vec) if m else None]], format="csc")
        self._lu = spla.splu(K, permc_spec="COLAMD")
        self.n_factor = getattr(self, "n_factor", 0) + 1

    # -- public updates ----------------------------------------------------
    def update(self, q=None, l=None, u=None, P=None):
        """Change problem data in place; scaling from setup is reused."""
        if q is not None:
            self.q = np.asarray(q, dtype=float).copy()
            self.qs = self.c * self.D * self.q
        if l is not None:
            self.l = np.clip(np.asarray(l, dtype=float), -BIG, BIG)
            self.ls = np.where(self.l <= -BIG, -BIG, self.E * self.l)
        if u is not None:
            self.u = np.clip(np.asarray(u, dtype=float), -BIG, BIG)
            self.us = np.where(self.u >= BIG, BIG, self.E * self.u)
        if P is not None:
            self.P = sp.csc_matrix(P)
            Dd = sp.diags(self.D)
            self.Ps = (self.c * (Dd @ self.P @ Dd)).tocsc()
            self._factor()

    def warm_start(self, x=None, y=None):
        if x is not None:
            self.x = np.asarray(x, dtype=float) / self.D
            self.z = self.As @ self.x
        if y is not None:
            self.y = self.c * np.asarray(y, dtype=float) / self.E

    def cold_start(self):
        self.x = np.zeros(self.n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)

    # -- residuals -----------------------------------------------------------
    def _unscaled(self, x, z, y):
        return self.D * x, z / self.E, self.E * y / self.c

    def _residuals(self, x, z, y):
        xu, zu, yu = self._unscaled(x, z, y)
        Ax = self.A @ xu
        Px = self.P @ xu
        Aty = self.At @ yu
        prim = np.max(np.abs(Ax - zu), initial=0.0)
        dual = np.max(np.abs(Px + self.q + Aty), initial=0.0)
        s = self.settings
        eps_p = s.eps_abs + s.eps_rel * max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0))
        eps_d = s.eps_abs + s.eps_rel * max(np.max(np.abs(Px), initial=0.0),
                                            np.max(np.abs(Aty), initial=0.0),
                                            np.max(np.abs(self.q), initial=0.0))
        return prim, dual, eps_p, eps_d

    def _prim_infeasible(self, dy):
        s = self.settings
        dyu = self.E * dy
        norm = np.max(np.abs(dyu), initial=0.0)
        if norm < 1e-12:
            return False
        tol = s.eps_prim_inf * norm
        if np.max(np.abs(self.At @ dyu), initial=0.0) > tol:
            return False
        pos = np.maximum(dyu, 0.0)
        neg = np.minimum(dyu, 0.0)
        if np.any((self.u >= BIG) & (pos > tol)) or np.any((self.l <= -BIG) & (neg < -tol)):
            return False
        support = (np.sum(np.where(self.u >= BIG, 0.0, self.u) * pos)
                   + np.sum(np.where(self.l <= -BIG, 0.0, self.l) * neg))
        return support < -tol

    def _dual_infeasible(self, dx):
        s = self.settings
        dxu = self.D * dx
        norm = np.max(np.abs(dxu), initial=0.0)
        if norm < 1e-12:
            return False
        tol = s.eps_dual_inf * norm
        if np.max(np.abs(self.P @ dxu), initial=0.0) > tol:
            return False
        if self.q @ dxu > -tol:
            return False
        Adx = self.A @ dxu
        lo_ok = np.where(self.l <= -BIG, True, Adx >= -tol)
        hi_ok = np.where(self.u >= BIG, True, Adx <= tol)
        return bool(np.all(lo_ok & hi_ok))

    # -- main loop -----------------------------------------------------------
    def solve(self) -> QpSolution:
        s = self.settings
        x, z, y = self.x, self.z, self.y
        rho_vec = self.rho_vec
        sigma, alpha = s.sigma, s.alpha
        ls, us = self.ls, self.us
        status = "max_iter"
        prim = dual = np.inf
        it = 0
        last_polish = 0
        failed_polish = 0
        early = False
        for it in range(1, s.max_iter + 1):
            x_prev, y_prev = x, y
            rhs = np.concatenate([sigma * x - self.qs, z - y / rho_vec])
            sol = self._lu.solve(rhs)
            xt = sol[: self.n]
            nu = sol[self.n:]
            zt = z + (nu - y) / rho_vec
            x = alpha * xt + (1.0 - alpha) * x
            zr = alpha * zt + (1.0 - alpha) * z
            z = np.clip(zr + y / rho_vec, ls, us)
            y = y + rho_vec * (zr - z)

            if it % s.check_interval == 0 or it == s.max_iter:
                prim, dual, eps_p, eps_d = self._residuals(x, z, y)
                if prim <= eps_p and dual <= eps_d:
                    status = "optimal"
                    break
                near = prim <= s.polish_window * eps_p and dual <= s.polish_window * eps_d
                # back off after failed attempts: each costs a few reduced KKT factorizations
                wait = s.polish_first if last_polish == 0 else s.polish_every * 2 ** min(failed_polish, 6)
                if s.polish and self.m and ((near and it - last_polish >= wait)
                                            or it - last_polish >= s.polish_force_every):
                    last_polish = it
                    res = self._polish(x, z, y, np.inf, np.inf)
                    if res is not None and self._converged(res[3], res[4], res[0], res[1], res[2]):
                        x, z, y, prim, dual = res
                        early = True
                        status = "optimal"
                        break
                    failed_polish += 1
                if self.m and self._prim_infeasible(y - y_prev):
                    status = "infeasible"
                    break
                if self._dual_infeasible(x - x_prev):
                    status = "unbounded"
                    break
            if s.adaptive_rho and it % s.adaptive_rho_interval == 0 and self.m:
                if not np.isfinite(prim):
                    prim, dual, eps_p, eps_d = self._residuals(x, z, y)
                new_rho = self._rho_estimate(x, z, y)
                if new_rho > self.rho * s.adaptive_rho_tolerance or new_rho < self.rho / s.adaptive_rho_tolerance:
                    self._set_rho_vec(new_rho)
                    rho_vec = self.rho_vec
                    self._factor()
        self.x, self.z, self.y = x, z, y
        if not np.isfinite(prim):
            prim, dual, _, _ = self._residuals(x, z, y)

        polished = early
        if s.polish and not early and status in ("optimal", "max_iter") and self.m:
            res = self._polish(x, z, y, prim, dual)
            if res is not None:
                x, z, y, prim, dual = res
                polished = True
                status = "optimal" if status == "max_iter" and self._converged(prim, dual, x, z, y) else status
        xu, zu, yu = self._unscaled(x, z, y)
        if status == "infeasible":
            obj = np.inf
        elif status == "unbounded":
            obj = -np.inf
        else:
            obj = float(0.5 * xu @ (self.P @ xu) + self.q @ xu + self.offset)
        return QpSolution(xu, yu, obj, status, float(prim), float(dual), it, polished)

    def _converged(self, prim, dual, x, z, y):
        _, _, eps_p, eps_d = self._residuals(x, z, y)
        return prim <= eps_p and dual <= eps_d

    def _rho_estimate(self, x, z, y):
        xu, zu, yu = x, z, y
        Ax = self.As @ xu
        Px = self.Ps @ xu
        Aty = self.AsT @ yu
        prim = np.max(np.abs(Ax - zu), initial=0.0)
        dual = np.max(np.abs(Px + self.qs + Aty), initial=0.0)
        pn = prim / (max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0)) + 1e-10)
        dn = dual / (max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                         np.max(np.abs(self.qs), initial=0.0)) + 1e-10)
        return self.rho * np.sqrt(pn / (dn + 1e-10))

    def _polish(self, x, z, y, prim, dual):
        """Active-set refinement of an approximate iterate.

        The initial guess takes every row whose dual says it is active plus
        every row sitting at a bound (degenerate rows carry zero multipliers
        and would otherwise be missed). Reduced KKT solves then add violated
        rows and drop rows whose multiplier has the wrong sign until the
        point is a KKT point or the round budget runs out.
        """
        s = self.settings
        ls, us = self.ls, self.us
        fixed = (us - ls) <= 1e-12 * np.maximum(1.0, np.abs(ls))
        tol_b = 1e-7 * np.maximum(1.0, np.abs(z))
        low = fixed | (z - ls < -y) | ((z - ls) <= tol_b)
        upp = ~low & (((us - z) < y) | ((us - z) <= tol_b))
        n = self.n
        best = None
        Pc, Ar = self.Ps.tocoo(), self.As.tocsr()
        for _ in range(s.polish_rounds):
            idx_l = np.flatnonzero(low)
            idx_u = np.flatnonzero(upp)
            rows = np.concatenate([idx_l, idx_u])
            b = np.concatenate([ls[idx_l], us[idx_u]])
            k = rows.size
            # reduced KKT [[P, A_r^T], [A_r, 0]] from triplets, plus its +-delta regularized twin
            Ared = Ar[rows].tocoo()
            ri = np.concatenate([Pc.row, n + Ared.row, Ared.col])
            ci = np.concatenate([Pc.col, Ared.col, n + Ared.row])
            vals = np.concatenate([Pc.data, Ared.data, Ared.data])
            K0 = sp.csc_matrix((vals, (ri, ci)), shape=(n + k, n + k))
            diag = np.arange(n + k)
            reg = np.concatenate([np.full(n, s.polish_delta), np.full(k, -s.polish_delta)])
            Kreg = sp.csc_matrix((np.concatenate([vals, reg]),
                                  (np.concatenate([ri, diag]), np.concatenate([ci, diag]))), shape=(n + k, n + k))
            rhs = np.concatenate([-self.qs, b])
            try:
                lu = spla.splu(Kreg, permc_spec="COLAMD")
            except RuntimeError:
                return best
            # refinement starts from the iterate so directions the active set leaves
            # undetermined stay where the iterate put them
            sol = np.concatenate([x, y[rows]])
            rnorm = max(1.0, np.max(np.abs(rhs), initial=0.0))
            last = np.inf
            for _ in range(s.polish_refine_iter):
                r = rhs - K0 @ sol
                rmax = np.max(np.abs(r), initial=0.0)
                # stop at the target or once refinement stalls (near-singular reduced KKT)
                if rmax <= 1e-13 * rnorm or rmax > 0.5 * last:
                    break
                last = rmax
                sol = sol + lu.solve(r)
            if not np.all(np.isfinite(sol)):
                return best
            xp = sol[:n]
            yp = np.zeros(self.m)
            yp[rows] = sol[n:]
            Ax = self.As @ xp
            tol_f = 1e-9 * np.maximum(1.0, np.abs(Ax))
            ymax = max(1.0, np.max(np.abs(yp), initial=0.0))
            act = low | upp
            add_l = ~act & (Ax < ls - tol_f)
            add_u = ~act & (Ax > us + tol_f)
            drop_l = low & ~fixed & (yp > 1e-9 * ymax)
            drop_u = upp & (yp < -1e-9 * ymax)
            if not (add_l.any() or add_u.any() or drop_l.any() or drop_u.any()):
                zp = np.clip(Ax, ls, us)
                pp, dp, _, _ = self._residuals(xp, zp, yp)
                if pp <= max(prim, s.eps_abs) * 1.0000001 and dp <= max(dual, s.eps_abs) * 1.0000001:
                    best = (xp, zp, yp, pp, dp)
                else:
                    log.debug("polish reached a KKT guess with residuals %.3g/%.3g", pp, dp)
                return best
            log.debug("polish round: +%d/+%d -%d/-%d", add_l.sum(), add_u.sum(), drop_l.sum(), drop_u.sum())
            low = (low & ~drop_l) | add_l
            upp = (upp & ~drop_u) | add_u
        return best


def solve_qp(problem: QpProblem, tol_abs: float = 1e-6, tol_rel: float = 1e-4, max_iter: int = 10000,
             warm_x=None, warm_y=None, **kwargs) -> QpSolution:
    """Solve a continuous QP (binary annotations must be empty)."""
    if problem.binary_vars.size:
        raise ValueError("solve_qp received binary variables; use solve_miqp_bb")
    settings = SolverSettings(eps_abs=tol_abs, eps_rel=tol_rel, max_iter=max_iter, **kwargs)
    solver = SplittingSolver(problem, settings)
    if warm_x is not None or warm_y is not None:
        solver.warm_start(warm_x, warm_y)
    return solver.solve()
