"""Best-first branch-and-bound over the binary annotations of a QpProblem.

Node relaxations are solved by :class:`SplittingSolver` with warm starts
from the parent. Binary bounds live in their own rows of ``A``, so fixing
a variable only touches ``l``/``u`` and the KKT factorization is reused.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .problem import QpProblem
from .splitting import QpSolution, SolverSettings, SplittingSolver

log = logging.getLogger(__name__)

DESK_SCALE_BINARIES = 40


@dataclass(order=True)
class _Node:
    bound: float
    # deeper nodes first among equal bounds, so ties do not turn the search breadth-first
    neg_depth: int
    seq: int
    fixed: dict = field(compare=False)
    warm_x: np.ndarray | None = field(compare=False, default=None)
    warm_y: np.ndarray | None = field(compare=False, default=None)


def _ensure_bound_rows(problem: QpProblem) -> QpProblem:
    """Return a problem whose binaries all own a dedicated ``0 <= x_j <= 1`` row."""
    n = problem.n
    rows = problem.bound_rows if problem.bound_rows is not None else np.full(n, -1)
    rows = rows.copy()
    # a bound row must be a singleton row with coefficient 1
    A = problem.A.tocsr()
    for j in problem.binary_vars:
        r = rows[j]
        if r >= 0:
            start, end = A.indptr[r], A.indptr[r + 1]
            if end - start != 1 or A.indices[start] != j or A.data[start] != 1.0:
                rows[j] = -1
    missing = [j for j in problem.binary_vars if rows[j] < 0]
    l, u = problem.l.copy(), problem.u.copy()
    if missing:
        extra = sp.coo_matrix((np.ones(len(missing)), (np.arange(len(missing)), missing)),
                              shape=(len(missing), n))
        A = sp.vstack([problem.A, extra]).tocsc()
        rows[missing] = problem.m + np.arange(len(missing))
        l = np.concatenate([l, np.zeros(len(missing))])
        u = np.concatenate([u, np.ones(len(missing))])
    else:
        A = problem.A
    bins = problem.binary_vars
    l[rows[bins]] = np.maximum(l[rows[bins]], 0.0)
    u[rows[bins]] = np.minimum(u[rows[bins]], 1.0)
    return QpProblem(problem.P, problem.q, A, l, u, bins, problem.var_names, problem.offset, rows)


class BranchAndBound:
    """Reusable MIQP workspace; :meth:`solve` may be called repeatedly with new ``q``."""

    def __init__(self, problem: QpProblem, settings: SolverSettings | None = None, tol: float = 1e-6,
                 node_limit: int = 10000, int_tol: float = 1e-6, feas_tol: float = 1e-6,
                 time_limit: float | None = None):
        self.problem = _ensure_bound_rows(problem)
        if self.problem.binary_vars.size > DESK_SCALE_BINARIES:
            log.debug("branch-and-bound over %d binaries exceeds desk scale", self.problem.binary_vars.size)
        # private copy: the dive temporarily lowers max_iter
        self.settings = replace(settings) if settings is not None else SolverSettings()
        self.solver = SplittingSolver(self.problem.with_binaries_relaxed(), self.settings)
        self.bins = self.problem.binary_vars
        self.bin_rows = self.problem.bound_rows[self.bins]
        self.tol = tol
        self.node_limit = node_limit
        self.int_tol = int_tol
        self.feas_tol = feas_tol
        self.time_limit = time_limit
        # fix-and-solve heuristic on the first nodes, then every dive_every nodes
        self.dive_nodes = 5
        self.dive_every = 25
        # a dive into an infeasible fixing is abandoned after this many iterations
        self.dive_max_iter = 1000
        self._last_dive_iter = 0
        self.A_csc = self.problem.A.tocsc()
        self.incumbent_history: list[float] = []
        self.bound_history: list[float] = []
        self.last_x: np.ndarray | None = None
        self.last_y: np.ndarray | None = None

    def update(self, q=None, P=None):
        if q is not None:
            self.problem.q = np.asarray(q, dtype=float).copy()
        if P is not None:
            self.problem.P = sp.csc_matrix(P)
        self.solver.update(q=q, P=P)

    def _round(self, x: np.ndarray) -> np.ndarray:
        """Greedy rounding: pick for each binary the value that keeps its rows feasible."""
        p = self.problem
        xr = x.copy()
        xb = xr[self.bins]
        near = np.round(np.clip(xb, 0.0, 1.0))
        frac = np.abs(xb - near)
        order = np.argsort(-frac, kind="stable")
        A = self.A_csc
        Ax = A @ xr
        for k in order:
            j = self.bins[k]
            lo, hi = A.indptr[j], A.indptr[j + 1]
            rows = A.indices[lo:hi]
            coef = A.data[lo:hi]
            if frac[k] <= self.int_tol:
                best_v = near[k]
            else:
                best, best_v = None, None
                for v in (near[k], 1.0 - near[k]):
                    val = Ax[rows] + coef * (v - xr[j])
                    viol = max(np.max(p.l[rows] - val, initial=0.0), np.max(val - p.u[rows], initial=0.0))
                    if best is None or viol < best - 1e-12:
                        best, best_v = viol, v
            Ax[rows] += coef * (best_v - xr[j])
            xr[j] = best_v
        return xr

    def _branch_index(self, x: np.ndarray, frac: np.ndarray) -> int:
        """Binary whose best single rounding still violates its rows the most; most fractional on ties.

        Fractional binaries that can be rounded either way at no cost (for
        instance an on/off switch of an idle device) are not worth a branch.
        """
        p = self.problem
        A = self.A_csc
        Ax = A @ x
        score = np.zeros(frac.size)
        for k in np.flatnonzero(frac > self.int_tol):
            j = self.bins[k]
            lo, hi = A.indptr[j], A.indptr[j + 1]
            rows = A.indices[lo:hi]
            coef = A.data[lo:hi]
            best = np.inf
            for v in (0.0, 1.0):
                val = Ax[rows] + coef * (v - x[j])
                viol = max(np.max(p.l[rows] - val, initial=0.0), np.max(val - p.u[rows], initial=0.0))
                best = min(best, viol)
            score[k] = best
        if np.max(score) <= self.feas_tol:
            return int(np.argmax(frac))
        return int(np.argmax(score + 1e-9 * frac))

    def _fix_and_solve(self, rounded: np.ndarray, fixed: dict, sol: QpSolution):
        """Fix every binary at its rounded value and re-solve the continuous part."""
        full = dict(fixed)
        for j in self.bins:
            full[int(j)] = float(rounded[j])
        self._apply(full)
        self.solver.warm_start(sol.x, sol.y)
        max_iter = self.solver.settings.max_iter
        self.solver.settings.max_iter = min(max_iter, max(self.dive_max_iter, 2 * sol.iterations))
        try:
            res = self.solver.solve()
        finally:
            self.solver.settings.max_iter = max_iter
        self._last_dive_iter = res.iterations
        if res.status != "optimal":
            return None
        x = res.x.copy()
        x[self.bins] = rounded[self.bins]
        return x

    def _apply(self, fixed: dict):
        l = self.problem.l.copy()
        u = self.problem.u.copy()
        for j, v in fixed.items():
            r = self.problem.bound_rows[j]
            l[r] = u[r] = float(v)
        self.solver.update(l=l, u=u)

    def solve(self, warm_x=None, warm_y=None) -> QpSolution:
        p = self.problem
        t0 = time.perf_counter()
        counter = itertools.count()
        heap = [_Node(-np.inf, 0, next(counter), {}, warm_x, warm_y)]
        inc_x, inc_obj = None, np.inf
        best_bound = -np.inf
        nodes = 0
        total_iter = 0
        self.incumbent_history = []
        self.bound_history = []
        status = "optimal"
        root_infeasible = False
        while heap:
            if nodes >= self.node_limit or (self.time_limit is not None and time.perf_counter() - t0 > self.time_limit):
                status = "max_iter"
                break
            node = heapq.heappop(heap)
            thresh = self.tol * max(1.0, abs(inc_obj)) if np.isfinite(inc_obj) else 0.0
            if node.bound >= inc_obj - thresh:
                heap = []
                break
            best_bound = max(best_bound, min(node.bound, inc_obj))
            self._apply(node.fixed)
            if node.warm_x is not None:
                self.solver.warm_start(node.warm_x, node.warm_y)
            sol = self.solver.solve()
            nodes += 1
            total_iter += sol.iterations
            if nodes == 1:
                self.last_x, self.last_y = sol.x, sol.y
            if sol.status == "infeasible":
                if nodes == 1:
                    root_infeasible = True
                continue
            if sol.status == "unbounded":
                raise RuntimeError("MIQP relaxation is unbounded")
            obj = sol.obj
            if nodes == 1:
                best_bound = obj
            if obj >= inc_obj - thresh:
                continue
            xb = sol.x[self.bins]
            frac = np.abs(xb - np.round(xb))
            cand = self._round(sol.x)
            if p.violation(cand) > self.feas_tol and (nodes <= self.dive_nodes or nodes % self.dive_every == 0):
                cand = self._fix_and_solve(cand, node.fixed, sol)
                total_iter += self._last_dive_iter
                self._apply(node.fixed)
            if cand is not None and p.violation(cand) <= self.feas_tol:
                cobj = p.objective(cand)
                if cobj < inc_obj:
                    inc_x, inc_obj = cand, cobj
                    self.incumbent_history.append(inc_obj)
                    thresh = self.tol * max(1.0, abs(inc_obj))
            if np.all(frac <= self.int_tol) or obj >= inc_obj - thresh:
                continue
            k = self._branch_index(sol.x, frac)
            j = int(self.bins[k])
            for v in (0, 1):
                fixed = dict(node.fixed)
                fixed[j] = v
                heapq.heappush(heap, _Node(obj, node.neg_depth - 1, next(counter), fixed, sol.x, sol.y))
            self.bound_history.append(best_bound)
        if heap:
            open_bound = min(nd.bound for nd in heap)
            best_bound = max(best_bound, min(open_bound, inc_obj))
        else:
            best_bound = inc_obj if np.isfinite(inc_obj) else best_bound
        self.bound_history.append(best_bound)
        self._apply({})
        if inc_x is None:
            st = "infeasible" if (root_infeasible or status == "optimal") else status
            return QpSolution(np.full(p.n, np.nan), np.zeros(p.m), np.inf, st, np.inf, np.inf, total_iter,
                              gap=np.inf, bound=best_bound, nodes=nodes)
        gap = (inc_obj - best_bound) / max(1.0, abs(inc_obj))
        if status == "max_iter" and gap <= self.tol:
            status = "optimal"
        return QpSolution(inc_x, np.zeros(p.m), inc_obj, status, p.violation(inc_x), 0.0, total_iter,
                          gap=max(gap, 0.0), bound=best_bound, nodes=nodes)


def solve_miqp_bb(problem: QpProblem, tol: float = 1e-6, node_limit: int = 10000,
                  settings: SolverSettings | None = None, **kwargs) -> QpSolution:
    """Globally solve a small MIQP by best-first branch-and-bound.

    Without binaries this is exactly :func:`solve_qp`.
    """
    if problem.binary_vars.size == 0:
        settings = settings or SolverSettings()
        return SplittingSolver(problem, settings).solve()
    bb = BranchAndBound(problem, settings, tol=tol, node_limit=node_limit, **kwargs)
    return bb.solve()
