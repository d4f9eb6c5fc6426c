import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import scenario, station, timeline, vehicle
from evflex.monolithic import FormulationOptions, assemble
from evflex.objectives import ObjectiveSpec
from evflex.qp import BranchAndBound, QpBuilder, QpProblem, read_triplets, solve_miqp_bb, solve_qp

TIGHT = dict(tol_abs=1e-9, tol_rel=1e-9, max_iter=50000)


def kkt_enumeration(P, q, A, l, u):
    """Dense oracle: try every active pattern (inactive / at lower / at upper) and keep the best KKT point."""
    n, m = q.size, l.size
    best_x, best_obj = None, np.inf
    choices = []
    for i in range(m):
        c = [0]
        if np.isfinite(l[i]):
            c.append(-1)
        if np.isfinite(u[i]) and u[i] != l[i]:
            c.append(1)
        if l[i] == u[i]:
            c = [-1]
        choices.append(c)
    for pattern in itertools.product(*choices):
        act = [i for i in range(m) if pattern[i] != 0]
        b = np.array([l[i] if pattern[i] < 0 else u[i] for i in act])
        Aa = A[act]
        k = len(act)
        K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]])
        rhs = np.r_[-q, b]
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        x, lam = sol[:n], sol[n:]
        Ax = A @ x
        if np.any(Ax < l - 1e-9) or np.any(Ax > u + 1e-9):
            continue
        # multiplier signs: row at its lower bound pushes up, at its upper bound pushes down
        ok = all((pattern[i] < 0 and (lam[j] <= 1e-9 or l[i] == u[i])) or (pattern[i] > 0 and lam[j] >= -1e-9)
                 for j, i in enumerate(act))
        if not ok:
            continue
        obj = 0.5 * x @ P @ x + q @ x
        if obj < best_obj:
            best_x, best_obj = x, obj
    return best_x, best_obj


@st.composite
def random_qp(draw, max_n=20, max_m=6):
    n = draw(st.integers(1, max_n))
    # m <= n keeps every active set of a random A linearly independent
    m = draw(st.integers(1, min(max_m, n)))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 5
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    ax = A @ x0
    kind = rng.integers(0, 4, size=m)
    l = np.where(kind == 1, np.inf, ax - rng.uniform(0, 2, m))
    u = np.where(kind == 0, np.inf, ax + rng.uniform(0, 2, m))
    l = np.where(kind == 1, -np.inf, l)
    l = np.where(kind == 3, ax, l)
    u = np.where(kind == 3, ax, u)
    return P, q, A, l, u


def qp(P, q, A, l, u, binary=()):
    return QpProblem(sp.csc_matrix(P), q, sp.csc_matrix(A), l, u, np.array(binary, dtype=int))


def test_halfspace_projection():
    b = QpBuilder()
    x = b.add_var("x", 1, lb=1.0)
    b.add_square(x, 1.0)
    sol = solve_qp(b.build(), **TIGHT)
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.obj == pytest.approx(1.0, abs=1e-7)


def test_symmetric_active_set():
    b = QpBuilder()
    v = b.add_var("v", 2)
    b.add_square(v, 1.0, 2.0)
    b.add_rows([0, 0], v, [1.0, 1.0], -np.inf, 2.0)
    sol = solve_qp(b.build(), **TIGHT)
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-7)
    assert sol.obj == pytest.approx(2.0, abs=1e-7)
    assert sol.prim_res <= 1e-6 and sol.dual_res <= 1e-6


def test_contradictory_rows_infeasible():
    P = np.array([[2.0]])
    sol = solve_qp(qp(P, np.zeros(1), np.array([[1.0], [1.0]]), np.array([1.0, -np.inf]), np.array([np.inf, 0.0])))
    assert sol.status == "infeasible"


def test_rejects_bad_data():
    with pytest.raises(ValueError):
        qp(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), np.eye(2), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        qp(np.eye(1), np.zeros(1), np.eye(1), np.ones(1), np.zeros(1))
    with pytest.raises(ValueError):
        qp(np.eye(1), np.zeros(1), np.eye(1), np.zeros(1), np.ones(1), binary=[3])
    with pytest.raises(ValueError):
        solve_qp(qp(np.eye(1), np.zeros(1), np.eye(1), np.zeros(1), np.ones(1), binary=[0]))


def test_deterministic():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(6, 6))
    p = qp(M @ M.T, rng.normal(size=6), rng.normal(size=(4, 6)), -np.ones(4), np.ones(4))
    a, b = solve_qp(p), solve_qp(p)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


@settings(max_examples=60)
@given(random_qp())
def test_matches_kkt_enumeration(data):
    P, q, A, l, u = data
    x_ref, obj_ref = kkt_enumeration(P, q, A, l, u)
    assert x_ref is not None
    sol = solve_qp(qp(P, q, A, l, u), **TIGHT)
    assert sol.status == "optimal"
    assert abs(sol.obj - obj_ref) <= 1e-6 * max(1.0, abs(obj_ref))


@settings(max_examples=30)
@given(random_qp(max_n=8, max_m=4), st.floats(0.01, 100.0))
def test_argmin_scaling_invariant(data, c):
    P, q, A, l, u = data
    a = solve_qp(qp(P, q, A, l, u), **TIGHT)
    b = solve_qp(qp(c * P, c * q, A, l, u), **TIGHT)
    np.testing.assert_allclose(a.x, b.x, atol=1e-5 * max(1.0, np.max(np.abs(a.x))))


def test_status_optimal_implies_small_residuals():
    rng = np.random.default_rng(4)
    for _ in range(5):
        M = rng.normal(size=(5, 5))
        p = qp(M @ M.T, rng.normal(size=5), rng.normal(size=(3, 5)), -np.ones(3), np.ones(3))
        sol = solve_qp(p, tol_abs=1e-6, tol_rel=1e-4)
        assert sol.status == "optimal"
        Ax = p.A @ sol.x
        eps_p = 1e-6 + 1e-4 * np.max(np.abs(Ax))
        assert p.violation(sol.x) <= eps_p


def test_miqp_without_binaries_equals_qp():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = qp(P, np.array([1.0, -1.0]), np.eye(2), -np.ones(2), np.ones(2))
    a, b = solve_qp(p), solve_miqp_bb(p)
    assert np.array_equal(a.x, b.x) and a.obj == b.obj


def test_single_binary_example():
    b = QpBuilder()
    x = b.add_var("x", 1, lb=0.0)
    z = b.add_var("b", 1, binary=True)
    b.add_rows([0, 0], np.r_[x, z], [1.0, -1.0], -np.inf, 0.0)
    b.add_square(x, 1.0, 0.5)
    sol = solve_miqp_bb(b.build())
    assert sol.status == "optimal"
    assert sol.x[z[0]] == 1.0
    assert sol.x[x[0]] == pytest.approx(0.5, abs=1e-6)
    assert sol.obj == pytest.approx(0.0, abs=1e-9)


def toy_schedule():
    T = 2
    fleet = [vehicle("v0", x0=10.0, ucmax=8.0, udmax=8.0, eta_ch=0.9, eta_ds=0.9),
             vehicle("v1", x0=2.0, ucmax=6.0, udmax=6.0, eta_ch=0.95, eta_ds=0.95)]
    e = np.zeros((T, 2))
    e[1, 1] = 3.0
    ref = ObjectiveSpec("track_profile", weight=0.05, reference=[-6.0, 9.0])
    return scenario(fleet, [station(T=T, base=[1.0, 0.5], pv=[4.0, 0.0])], timeline(T, 2, e=e), system=[ref])


def enumerate_binaries(problem):
    """Brute force: solve the continuous QP for every binary pattern."""
    best = np.inf
    for pattern in itertools.product([0.0, 1.0], repeat=problem.binary_vars.size):
        l, u = problem.l.copy(), problem.u.copy()
        rows = problem.bound_rows[problem.binary_vars]
        l[rows] = pattern
        u[rows] = pattern
        p = QpProblem(problem.P, problem.q, problem.A, l, u, offset=problem.offset)
        sol = solve_qp(p, **TIGHT)
        if sol.status == "optimal":
            best = min(best, sol.obj)
    return best


def test_bb_matches_enumeration_on_toy_schedule():
    sc = toy_schedule()
    problem, _ = assemble(sc, sc.objectives, FormulationOptions())
    assert problem.binary_vars.size == 4
    ref = enumerate_binaries(problem)
    sol = solve_miqp_bb(problem, tol=1e-9)
    assert sol.status == "optimal"
    assert sol.obj == pytest.approx(ref, rel=1e-6, abs=1e-8)
    xb = sol.x[problem.binary_vars]
    assert np.all((xb == 0) | (xb == 1))


@pytest.mark.parametrize("seed", range(4))
def test_bb_histories_monotone(seed):
    rng = np.random.default_rng(seed)
    n, nb = 6, 4
    b = QpBuilder()
    x = b.add_var("x", n, lb=-3.0, ub=3.0)
    z = b.add_var("z", nb, binary=True)
    b.add_square(x, rng.uniform(0.5, 2.0, n), rng.normal(size=n) * 2)
    for k in range(nb):
        # x_k only allowed away from zero when z_k is on
        b.add_rows([0, 0], [x[k], z[k]], [1.0, -3.0], -np.inf, 0.0)
        b.add_rows([0, 0], [x[k], z[k]], [1.0, 3.0], 0.0, np.inf)
    b.add_linear(z, rng.uniform(0.1, 1.0, nb))
    bb = BranchAndBound(b.build(), tol=1e-9)
    sol = bb.solve()
    assert sol.status == "optimal"
    assert all(a >= c for a, c in zip(bb.incumbent_history, bb.incumbent_history[1:]))
    assert all(a <= c + 1e-12 for a, c in zip(bb.bound_history, bb.bound_history[1:]))
    assert sol.obj == pytest.approx(enumerate_binaries(b.build()), rel=1e-6, abs=1e-8)


def test_node_limit_reports_gap():
    sc = toy_schedule()
    problem, _ = assemble(sc, sc.objectives, FormulationOptions())
    sol = solve_miqp_bb(problem, node_limit=1)
    assert sol.nodes == 1
    assert sol.status in ("optimal", "max_iter")
    if sol.status == "max_iter":
        assert sol.gap > 0 and np.isfinite(sol.obj)


def test_triplet_round_trip(tmp_path):
    sc = toy_schedule()
    problem, _ = assemble(sc, sc.objectives, FormulationOptions())
    problem.export_triplets(tmp_path / "p.txt")
    back = read_triplets(tmp_path / "p.txt")
    assert (back.P != problem.P).nnz == 0 and (back.A != problem.A).nnz == 0
    for name in ("q", "l", "u", "binary_vars"):
        assert np.array_equal(getattr(back, name), getattr(problem, name))
    assert back.offset == problem.offset
