from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsfcplan.pipeline import run_pipeline
from rsfcplan.postprocess import (
    TrajectoryBundle,
    dynamic_maxima,
    plan_document,
    read_plan_json,
    render_svg,
    time_scale,
    verify,
    write_csv,
    write_plan_json,
)
from rsfcplan.scenario import AgentSpec, Box, PlannerConfig, VoxelMap, empty_map, generate_forest_scenario

CFG = PlannerConfig()


def line_controls(a, b, N=5):
    """Bernstein controls of the straight line from a to b at constant speed."""
    s = np.linspace(0, 1, N + 1)[:, None]
    return np.asarray(a, float) * (1 - s) + np.asarray(b, float) * s


def line_bundle(pairs, T=2.0, radius=0.15):
    agents = [AgentSpec(k, radius, tuple(a), tuple(b)) for k, (a, b) in enumerate(pairs)]
    controls = np.array([[line_controls(a, b)] for a, b in pairs])
    return TrajectoryBundle(agents, np.array([0.0, T]), controls)


def rest_bundle(agents, T=4.0, N=7):
    """Smoothstep-like rest-to-rest pieces: repeated end controls give zero velocity and acceleration."""
    ctrls = []
    for a in agents:
        s = np.array([0, 0, 0, 0.5, 0.5, 1, 1, 1], float)[:, None]
        ctrls.append([np.asarray(a.start) * (1 - s) + np.asarray(a.goal) * s])
    return TrajectoryBundle(list(agents), np.array([0.0, T]), np.array(ctrls))


def kinds(report):
    return {v["kind"] for v in report.violations}


def test_head_on_collision_at_midpoint():
    b = line_bundle([((-1, 0, 1), (1, 0, 1)), ((1, 0, 1), (-1, 0, 1))])
    rep = verify(b, empty_map(), b.agents, CFG)
    hit = [v for v in rep.violations if v["kind"] == "inter_collision"]
    assert hit and hit[0]["agents"] == [0, 1]
    # Boxes first overlap when |dx| < 0.3, i.e. |2 - 2t| < 0.3 around t = 1.
    assert 0.84 <= hit[0]["t"] <= 1.0


def test_near_miss_obstacle():
    # Wall face at x = 0.5; an agent of radius 0.15 holding x = 0.35 - eps grazes it.
    vmap = VoxelMap((-5, -5, 0), 0.1, (100, 100, 25), boxes=[Box((0.5, -5, 0), (0.7, 5, 2.5))])
    for eps, bad in ((1e-4, True), (-1e-4, False)):
        x = 0.35 + eps
        a = AgentSpec(0, 0.15, (x, -1, 1), (x, 1, 1))
        b = rest_bundle([a])
        rep = verify(b, vmap, [a], CFG)
        assert ("obstacle" in kinds(rep)) is bad
        assert rep.min_obstacle_clearance == pytest.approx(0.5 - x, abs=1e-9)


def test_rest_bundle_passes():
    a = AgentSpec(0, 0.15, (0, 0, 1), (1, 1, 1))
    rep = verify(rest_bundle([a]), empty_map(), [a], CFG)
    assert rep.passed and rep.max_endpoint_error <= 1e-12


def test_detects_knot_jump_and_endpoint_error():
    a = AgentSpec(0, 0.15, (0, 0, 1), (1, 0, 1))
    c0 = line_controls((0, 0, 1), (0.5, 0, 1))
    c1 = line_controls((0.6, 0, 1), (1, 0, 1))
    b = TrajectoryBundle([a], np.array([0, 1.0, 2.0]), np.array([[c0, c1]]))
    rep = verify(b, empty_map(), [a], CFG)
    assert {"continuity", "endpoint"} <= kinds(rep)
    assert rep.max_jump[0] == pytest.approx(0.1)


def test_time_scale_examples():
    b = line_bundle([((0, 0, 1), (2, 0, 1))], T=1.0)  # speed 2 m/s, zero acceleration
    out = time_scale(b, v_max=1.0, a_max=10.0)
    assert out.scale == pytest.approx(2.0)
    assert dynamic_maxima(out, 0.01)[0] == pytest.approx(1.0)
    same = time_scale(b, v_max=5.0, a_max=10.0)
    assert same.scale == 1.0 and np.array_equal(same.knots, b.knots)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 3.0), st.floats(0.5, 5.0))
def test_scaling_respects_limits_and_geometry(seed, v_max, a_max):
    rng = np.random.default_rng(seed)
    knots = np.cumsum(np.concatenate([[0.0], rng.uniform(0.2, 1.0, 3)]))
    ctrl = rng.uniform(-1, 1, (1, 3, 6, 3))
    a = AgentSpec(0, 0.1, (0, 0, 0), (0, 0, 0))
    b = TrajectoryBundle([a], knots, ctrl)
    out = time_scale(b, v_max, a_max, dt=0.01, margin=CFG.scale_margin)
    V, A = dynamic_maxima(out, 0.01)
    assert V <= v_max + 1e-9 and A <= a_max + 1e-9
    t = np.linspace(0, b.duration, 37)
    np.testing.assert_allclose(out.trajectory(0).evaluate(t * out.scale), b.trajectory(0).evaluate(t), atol=1e-12)


def test_csv_row_count(tmp_path):
    b = line_bundle([((0, 0, 1), (1, 0, 1))], T=1.234)
    rows = write_csv(b, tmp_path / "t.csv", 0.01)
    assert rows == math.floor(1.234 / 0.01) + 1
    with open(tmp_path / "t.csv") as fh:
        data = list(csv.reader(fh))
    assert data[0] == ["t", "agent_id", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az"]
    assert len(data) == rows + 1


@pytest.fixture(scope="module")
def solved():
    vmap, agents = generate_forest_scenario(9, 4, 30)
    res = run_pipeline(vmap, agents, CFG)
    assert res.ok, res.message
    return vmap, agents, res


def test_solved_plan_verifies_and_reaches_goals(solved):
    vmap, agents, res = solved
    assert res.report.passed
    end = np.array([res.bundle.trajectory(k).evaluate(np.array([res.bundle.duration]))[0] for k in range(len(agents))])
    np.testing.assert_allclose(end, [a.goal for a in agents], atol=1e-6)
    V, A = dynamic_maxima(res.bundle, CFG.sample_dt)
    assert V <= CFG.v_max + 1e-9 and A <= CFG.a_max + 1e-9


def test_plan_json_round_trip(solved, tmp_path):
    vmap, agents, res = solved
    path = tmp_path / "plan.json"
    write_plan_json(path, plan_document(res.bundle, CFG, res.solver_stats()))
    bundle, config, doc = read_plan_json(path)
    assert config == CFG
    np.testing.assert_array_equal(bundle.controls, res.bundle.controls)
    again = verify(bundle, vmap, bundle.agents, config)
    assert again.to_dict() == res.report.to_dict()


def test_svg_polylines_and_determinism(solved):
    vmap, agents, res = solved
    corr = [c.to_dict() for c in res.sfcs]
    svg = render_svg(vmap, res.bundle, corr)
    assert svg.count("<polyline") == len(agents)
    assert svg == render_svg(vmap, res.bundle, corr)
    empty = render_svg(vmap)
    assert empty.startswith("<svg") and "<polyline" not in empty and empty.rstrip().endswith("</svg>")
