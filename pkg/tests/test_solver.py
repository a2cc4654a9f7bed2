from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from rsfcplan.solver import INF, SolverSettings, farkas_certificate, residuals, solve_qp


def random_qp(seed: int, n: int = 12, m: int = 10, rank: int | None = None):
    """Convex QP that is feasible by construction (bounds straddle A x0)."""
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(rank or n, n))
    P = sp.csc_matrix(F.T @ F + 1e-3 * np.eye(n))
    q = rng.normal(size=n)
    A = sp.random(m, n, density=0.4, random_state=seed, format="csc") + sp.eye(m, n, format="csc")
    x0 = rng.normal(size=n)
    Ax0 = A @ x0
    l = Ax0 - rng.uniform(0, 1, m)
    u = Ax0 + rng.uniform(0, 1, m)
    eq = rng.random(m) < 0.2
    l[eq] = u[eq] = Ax0[eq]
    l[rng.random(m) < 0.2] = -INF
    return P, q, A, l, u


def kkt_ok(P, q, A, l, u, res, tol):
    r = residuals(P, q, A, l, u, res.x, res.y)
    return all(v <= tol for v in r.values()), r


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.integers(2, 15), st.integers(1, 12))
def test_ipm_satisfies_kkt(seed, n, m):
    P, q, A, l, u = random_qp(seed, n, m)
    res = solve_qp(P, q, A, l, u)
    assert res.solved
    ok, r = kkt_ok(P, q, A, l, u, res, 1e-5)
    assert ok, r


@pytest.mark.parametrize("seed", range(8))
def test_ipm_and_admm_agree(seed):
    P, q, A, l, u = random_qp(seed, 10, 8, rank=6)
    a = solve_qp(P, q, A, l, u, SolverSettings(method="ipm"))
    b = solve_qp(P, q, A, l, u, SolverSettings(method="admm"))
    assert a.solved and b.solved
    assert a.objective == pytest.approx(b.objective, abs=1e-5, rel=1e-6)
    assert kkt_ok(P, q, A, l, u, b, 1e-4)[0]


def test_decomposition_matches_monolithic():
    blocks = [random_qp(s, 6, 4) for s in range(3)]
    P = sp.block_diag([b[0] for b in blocks], format="csc")
    A = sp.block_diag([b[2] for b in blocks], format="csc")
    q, l, u = (np.concatenate([b[i] for b in blocks]) for i in (1, 3, 4))
    a = solve_qp(P, q, A, l, u)
    b = solve_qp(P, q, A, l, u, decompose=False)
    assert a.info["components"] == 3
    assert a.objective == pytest.approx(b.objective, abs=1e-7)


@pytest.mark.parametrize("method", ["ipm", "admm"])
def test_infeasible_box_and_halfspace(method):
    # x0 <= 0, x1 <= 0, x0 + x1 >= 1.
    P = sp.eye(2, format="csc")
    A = sp.csc_matrix(np.array([[1.0, 0], [0, 1], [1, 1]]))
    l = np.array([-INF, -INF, 1.0])
    u = np.array([0.0, 0.0, INF])
    res = solve_qp(P, np.zeros(2), A, l, u, SolverSettings(method=method), decompose=False)
    assert res.status == "primal_infeasible"
    assert res.certificate is not None and res.certificate > 0


def test_empty_interval_short_circuits():
    res = solve_qp(sp.eye(1), np.zeros(1), sp.eye(1), np.array([1.0]), np.array([0.0]))
    assert res.status == "primal_infeasible" and res.info["reason"] == "empty_row_interval"
    assert res.iterations == 0


def test_farkas_certificate_check():
    A = sp.csc_matrix(np.array([[1.0], [1.0]]))
    l, u = np.array([1.0, -INF]), np.array([INF, 0.0])
    assert farkas_certificate(A, l, u, np.array([-1.0, 1.0])) is not None
    assert farkas_certificate(A, l, u, np.array([1.0, -1.0])) is None
    assert farkas_certificate(A, l, u, np.zeros(2)) is None


def test_unconstrained_minimiser():
    P = sp.csc_matrix(np.diag([2.0, 4.0]))
    q = np.array([-2.0, -4.0])
    A = sp.csc_matrix((0, 2))
    res = solve_qp(P, q, A, np.zeros(0), np.zeros(0))
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-9)
