from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from rsfcplan.bernstein import PiecewiseBernstein
from rsfcplan.pipeline import run_pipeline
from rsfcplan.qp import assemble, expected_equality_rows, kkt_report, solve
from rsfcplan.rsfc import HalfSpace, RsfcEntry, RsfcSequence
from rsfcplan.scenario import AgentSpec, Box, PlannerConfig, generate_forest_scenario
from rsfcplan.sfc import Corridor, CorridorSequence
from rsfcplan.solver import SolverSettings
from rsfcplan.timealloc import merge_time_segments

CFG = PlannerConfig()
HUGE = Box((-100, -100, -100), (100, 100, 100))


def quintic(a, b, T, t):
    """Rest-to-rest minimum-jerk profile and its first two derivatives."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    s = np.asarray(t, float)[:, None] / T
    pos = a + (b - a) * (10 * s**3 - 15 * s**4 + 6 * s**5)
    vel = (b - a) * (30 * s**2 - 60 * s**3 + 30 * s**4) / T
    acc = (b - a) * (60 * s - 180 * s**2 + 120 * s**3) / T**2
    return pos, vel, acc


def free_problem(agents, transitions, l_max, config=CFG, rsfcs=None, seg_rsfc=None):
    """Problem with one huge corridor per segment, so only the equalities bind."""
    parts = {a.id: transitions for a in agents}
    seg = merge_time_segments(parts, seg_rsfc or {}, l_max, config.t_step)
    seqs = [CorridorSequence(a.id, [Corridor(HUGE, (0, l_max - 1))] * (len(transitions) + 1)) for a in agents]
    return assemble(agents, seqs, rsfcs or {}, seg, config), seg


@pytest.mark.parametrize("transitions", [[], [2], [1, 4, 5]])
def test_equality_only_matches_quintic(transitions):
    a = AgentSpec(0, 0.15, (0.0, -1.0, 1.0), (2.0, 1.5, 1.5))
    prob, seg = free_problem([a], transitions, 5)
    res = solve(prob)
    assert res.solved
    traj = PiecewiseBernstein(seg.knots, prob.controls(res.x)[0])
    t = np.linspace(0, seg.duration, 401)
    want = quintic(a.start, a.goal, seg.duration, t)
    for order in range(3):
        np.testing.assert_allclose(traj.evaluate(t, order), want[order], atol=1e-6)


def test_equality_only_matches_direct_kkt_solve():
    agents = [AgentSpec(0, 0.15, (0, 0, 1), (1, 2, 1)), AgentSpec(1, 0.15, (3, 0, 1), (0, 0, 2))]
    prob, _ = free_problem(agents, [2, 3], 4)
    P, q, A_eq, b = 2 * prob.Q, np.zeros(prob.n_vars), prob.A_eq, prob.b_eq
    K = sp.bmat([[P, A_eq.T], [A_eq, None]]).toarray()
    sol = np.linalg.solve(K, np.concatenate([-q, b]))[: prob.n_vars]
    res = solve(prob)
    np.testing.assert_allclose(res.x, sol, atol=1e-6)


def test_counts_two_agents_three_segments():
    agents = [AgentSpec(0, 0.15, (0, 0, 1), (1, 0, 1)), AgentSpec(1, 0.15, (0, 1, 1), (1, 1, 1))]
    prob, seg = free_problem(agents, [2, 4], 4)
    assert seg.M == 3
    assert prob.n_vars == 108
    # Per axis: 3 start + 3 goal + 3 per interior knot.
    assert prob.eq_rows_raw == expected_equality_rows(2, 3) == 2 * 3 * (6 + 3 * 2) == 72
    assert prob.A_eq.shape == (72, 108)
    assert np.linalg.matrix_rank(prob.A_eq.toarray()) == prob.A_eq.shape[0]
    assert prob.A_in.shape[0] == 108


def test_hessian_symmetric_psd():
    agents = [AgentSpec(0, 0.15, (0, 0, 1), (1, 0, 1))]
    prob, _ = free_problem(agents, [1, 3, 4], 4)
    Q = prob.Q.toarray()
    np.testing.assert_allclose(Q, Q.T, atol=1e-12)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(200, Q.shape[0]))
    assert np.all(np.einsum("ij,jk,ik->i", d, Q, d) >= -1e-9)


def test_rsfc_rows_are_control_point_differences():
    agents = [AgentSpec(0, 0.15, (0, 0, 1), (0, 0, 1)), AgentSpec(1, 0.15, (1, 0, 1), (1, 0, 1))]
    rs = {(0, 1): RsfcSequence((0, 1), [RsfcEntry(HalfSpace("+x", 0.3), (0, 2))])}
    prob, seg = free_problem(agents, [], 3, rsfcs=rs, seg_rsfc={(0, 1): []})
    rows = prob.A_in.toarray()[prob.n_vars :]
    assert rows.shape[0] == prob.degree + 1
    for k, r in enumerate(rows):
        assert r[prob.index(1, 0, 0, k)] == 1 and r[prob.index(0, 0, 0, k)] == -1 and np.abs(r).sum() == 2
    assert np.all(prob.l_in[prob.n_vars :] == 0.3)
    res = solve(prob)
    assert res.solved


def test_contradictory_halfspace_is_infeasible():
    # Agent 1 is pinned to the left of agent 0 while the half-space demands it stays right.
    agents = [AgentSpec(0, 0.15, (1, 0, 1), (1, 0, 1)), AgentSpec(1, 0.15, (0, 0, 1), (0, 0, 1))]
    rs = {(0, 1): RsfcSequence((0, 1), [RsfcEntry(HalfSpace("+x", 0.3), (0, 2))])}
    prob, _ = free_problem(agents, [], 3, rsfcs=rs, seg_rsfc={(0, 1): []})
    for method in ("ipm", "admm"):
        res = solve(prob, SolverSettings(method=method))
        assert res.status == "primal_infeasible"
        assert res.certificate is not None


def test_constrained_forest_instance_kkt():
    vmap, agents = generate_forest_scenario(4, 6, 30)
    res = run_pipeline(vmap, agents, CFG)
    assert res.ok, res.message
    kkt = kkt_report(res.problem, res.qp)
    assert kkt["primal"] <= 1e-5
    assert kkt["stationarity"] <= 1e-5
    assert kkt["complementarity"] <= 1e-5
    assert kkt["dual_sign"] <= 1e-5
    again = solve(res.problem)
    assert again.status == res.qp.status
    assert res.problem.cost(again.x) == pytest.approx(res.cost, abs=1e-9)
