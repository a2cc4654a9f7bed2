from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import enumerate_paths, min_transitions_bruteforce, min_transitions_dp, realizable_successors
from rsfcplan.errors import RsfcError
from rsfcplan.mapf import DiscretePlan
from rsfcplan.rsfc import (
    DIRECTIONS,
    HalfSpace,
    build_all_rsfc,
    build_rsfc,
    collision_extent,
    count_transitions,
    greedy_cover,
    halfspace_margin,
    opposite,
    selection_matrix,
)
from rsfcplan.scenario import AgentSpec, PlannerConfig, generate_forest_scenario
from rsfcplan.mapf import plan_discrete

CFG = PlannerConfig()


def make_plan(*paths, radius=0.15) -> DiscretePlan:
    wp = np.array(paths, dtype=float)
    agents = [AgentSpec(k, radius, tuple(p[0]), tuple(p[-1])) for k, p in enumerate(wp)]
    nodes = np.zeros(wp.shape[:2], dtype=np.int64)
    return DiscretePlan(agents, wp, nodes, 0, 0, np.array([0.5, 0.5, 1.0]))


def test_margins():
    a = AgentSpec(0, 0.15, (0, 0, 1), (1, 1, 1))
    b = AgentSpec(1, 0.15, (1, 0, 1), (0, 1, 1))
    assert halfspace_margin(a, b, "+x", CFG) == pytest.approx(0.3)
    assert halfspace_margin(a, b, "-z", CFG) == pytest.approx(0.6)
    z = AgentSpec(2, 0.0, (0, 0, 1), (1, 1, 1))
    assert halfspace_margin(z, z, "+y", CFG) == 0.0
    np.testing.assert_allclose(collision_extent(a, b, CFG), [0.3, 0.3, 0.6])


def test_halfspace_membership_is_strict():
    h = HalfSpace("+x", 0.3)
    assert not h.contains((0.3, 0, 0))
    assert h.contains((0.3000001, 0, 0))
    assert not HalfSpace("-z", 0.6).contains((0, 0, -0.6))
    assert h.negated().direction == "-x"


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.sampled_from(DIRECTIONS),
       st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_halfspace_separates_from_collision_box(p, d, ri, rj):
    a, b = AgentSpec(0, ri, (0, 0, 0), (0, 0, 0)), AgentSpec(1, rj, (0, 0, 0), (0, 0, 0))
    h = HalfSpace(d, halfspace_margin(a, b, d, CFG))
    ext = collision_extent(a, b, CFG)
    if h.contains(p):
        assert np.any(np.abs(p) > ext - 1e-15) or np.all(ext == 0)


def test_single_halfspace_when_path_stays_in_one():
    plan = make_plan([[0, 0, 1]] * 4, [[1, 0, 1], [1.5, 0, 1], [2, 0, 1], [2, 0.5, 1]])
    seq = build_rsfc(plan, 0, 1, CFG)
    assert seq.directions == ["+x"] and seq.transitions == 0 and seq.covers == [(0, 3)]


def test_crossing_around_collision_box_uses_one_transition():
    # Relative path goes from straight above (+y) to the right (+x) of agent 0.
    rel = [[0, 1, 0], [0, 1, 0], [0.5, 0.5, 0], [1, 0, 0], [1, 0, 0]]
    plan = make_plan([[0, 0, 1]] * 5, [[r[0], r[1], 1] for r in rel])
    seq = build_rsfc(plan, 0, 1, CFG)
    sat = selection_matrix(np.array(rel, float))
    assert seq.transitions == 1 == min_transitions_bruteforce(sat)
    assert seq.directions in (["+y", "+x"],)


def test_swap_with_detour_is_minimal():
    # Agents exchange x positions, agent 1 side-stepping in y.
    p0 = [[0, 0, 1], [0.5, 0, 1], [1, 0, 1], [1, 0, 1], [1, 0, 1]]
    p1 = [[1, 0, 1], [1, 0.5, 1], [0.5, 0.5, 1], [0, 0.5, 1], [0, 0, 1]]
    plan = make_plan(p0, p1)
    rel = plan.waypoints[1] - plan.waypoints[0]
    seq = build_rsfc(plan, 0, 1, CFG)
    assert seq.transitions == min_transitions_bruteforce(selection_matrix(rel)) == 2


def test_zero_relative_waypoint_rejected():
    with pytest.raises(RsfcError) as err:
        build_rsfc(make_plan([[0, 0, 1], [0.5, 0, 1]], [[0.5, 0, 1], [0.5, 0, 1]]), 0, 1, CFG)
    assert err.value.reason == "zero_relative_waypoint"


def test_dead_end_reported_on_unrealizable_input():
    # Not producible by a conflict-free grid plan; the greedy pass must fail loudly.
    plan = make_plan([[0, 0, 0], [0, 0, 0]], [[-1, 0, 0], [1, -1, 0]])
    with pytest.raises(RsfcError) as err:
        build_rsfc(plan, 0, 1, CFG)
    assert err.value.reason == "no_admissible_direction"


def test_entries_cover_and_satisfy():
    vmap, agents = generate_forest_scenario(2, 8, 30)
    plan = plan_discrete(vmap, agents, CFG)
    for (i, j), seq in build_all_rsfc(plan, CFG).items():
        rel = plan.waypoints[plan.index_of(j)] - plan.waypoints[plan.index_of(i)]
        covered = [k for e in seq.entries for k in range(e.covers[0], e.covers[1] + 1)]
        assert covered == list(range(plan.l_max))
        for e in seq.entries:
            for k in range(e.covers[0], e.covers[1] + 1):
                assert e.halfspace.selects(rel[k])
        for a, b in zip(seq.directions, seq.directions[1:]):
            assert b != DIRECTIONS[opposite(DIRECTIONS.index(a))]
        mirror = build_rsfc(plan, j, i, CFG)
        assert mirror.covers == seq.covers
        assert [DIRECTIONS[opposite(DIRECTIONS.index(d))] for d in seq.directions] == mirror.directions


def test_dp_oracle_matches_bruteforce():
    rng = np.random.default_rng(0)
    sat = rng.random((300, 5, 6)) < 0.35
    dp = min_transitions_dp(sat)
    for p in range(len(sat)):
        assert dp[p] == min_transitions_bruteforce(sat[p])


def test_greedy_matches_oracle_on_realizable_3d_paths():
    cells = np.array([c for c in itertools.product((-1, 0, 1), repeat=3) if any(c)])
    succ = realizable_successors(cells)
    for length in range(1, 6):
        paths = enumerate_paths(succ, length)
        sat = selection_matrix(cells[paths].astype(float))
        assign, ok = greedy_cover(sat)
        assert ok.all()
        np.testing.assert_array_equal(count_transitions(assign), min_transitions_dp(sat))


def test_greedy_can_be_suboptimal_on_arbitrary_sign_sequences():
    # Documents why the minimality check is restricted to realizable paths.
    sat = selection_matrix(np.array([[[-1.0, 0, 0], [1, -1, 0]]]))
    _, ok = greedy_cover(sat)
    assert not ok[0] and min_transitions_dp(sat)[0] == 1
