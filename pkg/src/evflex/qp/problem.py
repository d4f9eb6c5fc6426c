"""Canonical sparse QP form and an incremental builder.

Problems are stored as

    minimize    0.5 x'Px + q'x + offset
    subject to  l <= Ax <= u

with an optional set of variables restricted to {0, 1}. Variable bounds are
plain rows of ``A`` so the solver sees a single constraint block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

INF = np.inf


@dataclass
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    binary_vars: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    var_names: dict = field(default_factory=dict)
    offset: float = 0.0
    # row index of the bound row of each variable, -1 if it has none
    bound_rows: np.ndarray | None = None

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        self.A = sp.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.binary_vars = np.asarray(self.binary_vars, dtype=int)
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns, expected {n}")
        m = self.A.shape[0]
        if self.l.size != m or self.u.size != m:
            raise ValueError("bound vectors must match the number of rows of A")
        if np.any(self.l > self.u):
            bad = int(np.flatnonzero(self.l > self.u)[0])
            raise ValueError(f"row {bad}: lower bound {self.l[bad]} exceeds upper {self.u[bad]}")
        if self.binary_vars.size and (self.binary_vars.min() < 0 or self.binary_vars.max() >= n):
            raise ValueError("binary variable index out of range")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-9 * max(1.0, abs(self.P).max()):
            raise ValueError("P must be symmetric")
        if np.any(self.P.diagonal() < 0):
            raise ValueError("P has a negative diagonal entry, not PSD")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.l.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.offset)

    def violation(self, x: np.ndarray) -> float:
        """Largest constraint violation of ``x`` (infinity norm)."""
        if self.m == 0:
            return 0.0
        Ax = self.A @ x
        return float(max(np.max(self.l - Ax, initial=0.0), np.max(Ax - self.u, initial=0.0)))

    def with_binaries_relaxed(self) -> "QpProblem":
        return QpProblem(self.P, self.q, self.A, self.l, self.u, np.zeros(0, dtype=int),
                         self.var_names, self.offset, self.bound_rows)

    def export_triplets(self, path) -> None:
        """Write the problem in a plain-text sparse triplet format.

        Sections ``P``, ``A`` hold ``row col value`` lines; ``q``, ``l``, ``u``
        hold ``index value`` lines; ``binary`` lists indices.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# n {self.n} m {self.m} offset {float(self.offset)!r}\n")
            for name, mat in (("P", sp.triu(self.P).tocoo()), ("A", self.A.tocoo())):
                fh.write(f"{name} {mat.nnz}\n")
                for r, c, v in zip(mat.row, mat.col, mat.data):
                    fh.write(f"{r} {c} {float(v)!r}\n")
            for name, vec in (("q", self.q), ("l", self.l), ("u", self.u)):
                fh.write(f"{name} {vec.size}\n")
                for i, v in enumerate(vec):
                    fh.write(f"{i} {float(v)!r}\n")
            fh.write(f"binary {self.binary_vars.size}\n")
            for i in self.binary_vars:
                fh.write(f"{i}\n")


def read_triplets(path) -> QpProblem:
    """Inverse of :meth:`QpProblem.export_triplets`."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        n, m, offset = int(header[2]), int(header[4]), float(header[6])
        mats, vecs, binary = {}, {}, []
        while True:
            line = fh.readline()
            if not line:
                break
            name, count = line.split()
            count = int(count)
            rows = [fh.readline().split() for _ in range(count)]
            if name in ("P", "A"):
                shape = (n, n) if name == "P" else (m, n)
                r = [int(t[0]) for t in rows]
                c = [int(t[1]) for t in rows]
                v = [float(t[2]) for t in rows]
                mats[name] = sp.coo_matrix((v, (r, c)), shape=shape).tocsc()
            elif name == "binary":
                binary = [int(t[0]) for t in rows]
            else:
                vec = np.zeros(n if name == "q" else m)
                for t in rows:
                    vec[int(t[0])] = float(t[1])
                vecs[name] = vec
    Pu = mats["P"]
    P = Pu + sp.triu(Pu, k=1).T
    return QpProblem(P, vecs["q"], mats["A"], vecs["l"], vecs["u"], np.array(binary, dtype=int),
                     offset=offset)


class QpBuilder:
    """Accumulates variables, rows and objective terms, then emits a QpProblem.

    Quadratic terms use the ``0.5 x'Px`` convention; :meth:`add_square` is the
    friendlier entry point for ``w * (x_i - target)^2`` penalties.
    """

    def __init__(self):
        self.n = 0
        self.names: dict[str, np.ndarray] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._binary: list[np.ndarray] = []
        self._ar: list[np.ndarray] = []
        self._ac: list[np.ndarray] = []
        self._av: list[np.ndarray] = []
        self._rl: list[np.ndarray] = []
        self._ru: list[np.ndarray] = []
        self.m = 0
        self._pr: list[np.ndarray] = []
        self._pc: list[np.ndarray] = []
        self._pv: list[np.ndarray] = []
        self._q: list[tuple[np.ndarray, np.ndarray]] = []
        self.offset = 0.0

    def add_var(self, name: str, size: int, lb=-INF, ub=INF, binary: bool = False) -> np.ndarray:
        if name in self.names:
            raise ValueError(f"duplicate variable block {name!r}")
        idx = np.arange(self.n, self.n + size)
        self.n += size
        self.names[name] = idx
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy()
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy()
        if binary:
            lb = np.maximum(lb, 0.0)
            ub = np.minimum(ub, 1.0)
            self._binary.append(idx)
        self._lb.append(lb)
        self._ub.append(ub)
        return idx

    def add_rows(self, row, col, val, lo, hi) -> np.ndarray:
        """Append constraint rows given local row numbers ``row`` (0-based)."""
        row = np.asarray(row, dtype=int)
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        k = max(int(row.max()) + 1 if row.size else 0, lo.size, hi.size)
        lo = np.broadcast_to(lo, (k,))
        hi = np.broadcast_to(hi, (k,))
        self._ar.append(row + self.m)
        self._ac.append(np.asarray(col, dtype=int))
        self._av.append(np.asarray(val, dtype=float))
        self._rl.append(lo.copy())
        self._ru.append(hi.copy())
        rows = np.arange(self.m, self.m + k)
        self.m += k
        return rows

    def add_quadratic(self, i, j, v) -> None:
        """Add ``v`` to P[i, j] and P[j, i] (once on the diagonal)."""
        i = np.atleast_1d(np.asarray(i, dtype=int))
        j = np.atleast_1d(np.asarray(j, dtype=int))
        v = np.broadcast_to(np.asarray(v, dtype=float), i.shape)
        off = i != j
        self._pr += [i, j[off]]
        self._pc += [j, i[off]]
        self._pv += [v.copy(), v[off].copy()]

    def add_linear(self, idx, v) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        self._q.append((idx, np.broadcast_to(np.asarray(v, dtype=float), idx.shape).copy()))

    def add_square(self, idx, weight, target=0.0) -> None:
        """Add ``sum weight * (x[idx] - target)**2``."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        weight = np.broadcast_to(np.asarray(weight, dtype=float), idx.shape)
        target = np.broadcast_to(np.asarray(target, dtype=float), idx.shape)
        self.add_quadratic(idx, idx, 2.0 * weight)
        self.add_linear(idx, -2.0 * weight * target)
        self.offset += float(np.sum(weight * target**2))

    def build(self) -> QpProblem:
        n = self.n
        lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        binary = np.concatenate(self._binary) if self._binary else np.zeros(0, dtype=int)
        is_bin = np.zeros(n, dtype=bool)
        is_bin[binary] = True
        bounded = np.isfinite(lb) | np.isfinite(ub) | is_bin
        bvars = np.flatnonzero(bounded)
        bound_rows = np.full(n, -1, dtype=int)
        bound_rows[bvars] = self.m + np.arange(bvars.size)

        ar = (np.concatenate(self._ar + [self.m + np.arange(bvars.size)]) if (self._ar or bvars.size)
              else np.zeros(0, int))
        ac = np.concatenate(self._ac + [bvars]) if (self._ac or bvars.size) else np.zeros(0, int)
        av = np.concatenate(self._av + [np.ones(bvars.size)]) if (self._av or bvars.size) else np.zeros(0)
        m = self.m + bvars.size
        A = sp.coo_matrix((av, (ar, ac)), shape=(m, n)).tocsc()
        A.sum_duplicates()
        l = np.concatenate(self._rl + [lb[bvars]]) if m else np.zeros(0)
        u = np.concatenate(self._ru + [ub[bvars]]) if m else np.zeros(0)

        if self._pr:
            P = sp.coo_matrix((np.concatenate(self._pv), (np.concatenate(self._pr), np.concatenate(self._pc))),
                              shape=(n, n)).tocsc()
            P.sum_duplicates()
        else:
            P = sp.csc_matrix((n, n))
        q = np.zeros(n)
        for idx, v in self._q:
            np.add.at(q, idx, v)
        return QpProblem(P, q, A, l, u, np.sort(binary), dict(self.names), self.offset, bound_rows)
