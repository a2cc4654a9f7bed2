"""Time scaling, independent verification and output files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .bernstein import PiecewiseBernstein, evaluate
from .scenario import AgentSpec, PlannerConfig, VoxelMap

CONTINUITY_TOL = 1e-6
ENDPOINT_TOL = 1e-6
_CLEARANCE_WINDOW = 0.5


@dataclass
class TrajectoryBundle:
    """All agents' trajectories on one knot vector; ``controls`` is ``(Nq, M, N+1, 3)``."""

    agents: list[AgentSpec]
    knots: np.ndarray
    controls: np.ndarray
    scale: float = 1.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)

    @property
    def duration(self) -> float:
        return float(self.knots[-1] - self.knots[0])

    @property
    def degree(self) -> int:
        return self.controls.shape[2] - 1

    def trajectory(self, k: int) -> PiecewiseBernstein:
        return PiecewiseBernstein(self.knots, self.controls[k])

    def sample_times(self, dt: float) -> np.ndarray:
        n = int(np.floor(self.duration / dt + 1e-9))
        t = self.knots[0] + dt * np.arange(n + 1)
        return t

    def to_dict(self) -> dict:
        return {
            "agents": [a.to_dict() for a in self.agents],
            "knots": self.knots.tolist(),
            "scale": self.scale,
            "controls": self.controls.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryBundle":
        agents = [AgentSpec.from_dict(a) for a in d["agents"]]
        controls = np.asarray(d["controls"], dtype=float)
        if controls.size == 0:
            controls = np.zeros((0, max(len(d["knots"]) - 1, 1), 6, 3))
        return cls(agents, np.asarray(d["knots"], dtype=float), controls, float(d.get("scale", 1.0)))


def dynamic_maxima(bundle: TrajectoryBundle, dt: float) -> tuple[float, float]:
    """Sampled maximum speed and acceleration norm over all agents.

    Each piece is sampled on its own grid, endpoints included, so one-sided
    values at knots are never skipped.
    """
    v = a = 0.0
    N = bundle.degree
    if N < 1:
        return v, a
    for m in range(len(bundle.knots) - 1):
        h = float(bundle.knots[m + 1] - bundle.knots[m])
        tau = np.linspace(0.0, 1.0, max(2, int(np.ceil(h / dt)) + 1))
        for c in bundle.controls[:, m]:
            d1 = N * np.diff(c, axis=0) / h
            v = max(v, float(np.max(np.linalg.norm(evaluate(d1, tau), axis=-1))))
            if N >= 2:
                d2 = (N - 1) * np.diff(d1, axis=0) / h
                a = max(a, float(np.max(np.linalg.norm(evaluate(d2, tau), axis=-1))))
    return v, a


def time_scale(bundle: TrajectoryBundle, v_max: float, a_max: float, dt: float = 0.01, margin: float = 0.0) -> TrajectoryBundle:
    """Uniformly stretch time so sampled speed and acceleration respect the limits."""
    V, A = dynamic_maxima(bundle, dt)
    s = max(1.0, V / v_max, np.sqrt(A / a_max))
    if s > 1.0:
        s *= 1.0 + margin
    out = TrajectoryBundle(bundle.agents, bundle.knots * s, bundle.controls.copy(), bundle.scale * s, dict(bundle.info))
    out.info.update({"v_peak_before": V, "a_peak_before": A})
    return out


# Verification evaluates pieces from the raw basis, sharing no code with the
# trajectory classes used during planning.

def _raw_eval(controls: np.ndarray, knots: np.ndarray, t: np.ndarray, order: int = 0) -> np.ndarray:
    M = controls.shape[0]
    seg = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, M - 1)
    out = np.zeros((len(t), 3))
    for m in range(M):
        sel = seg == m
        if not sel.any():
            continue
        h = knots[m + 1] - knots[m]
        c = controls[m]
        for _ in range(order):
            c = (len(c) - 1) * np.diff(c, axis=0) / h
        deg = len(c) - 1
        tau = (t[sel] - knots[m]) / h
        basis = np.stack([comb(deg, k) * tau**k * (1 - tau) ** (deg - k) for k in range(deg + 1)], axis=1)
        out[sel] = basis @ c
    return out


def _endpoint_derivs(c: np.ndarray, h: float, at_end: bool, max_order: int) -> list[np.ndarray]:
    vals = []
    cur = c
    for r in range(max_order + 1):
        vals.append(cur[-1] if at_end else cur[0])
        if len(cur) > 1:
            cur = (len(cur) - 1) * np.diff(cur, axis=0) / h
    return vals


def _occupied_cells(vmap: VoxelMap) -> tuple[np.ndarray, np.ndarray]:
    # Vertical runs of occupied voxels; distance to the union is unchanged.
    boxes = vmap.occupied_boxes()
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array([b.lo for b in boxes]), np.array([b.hi for b in boxes])


@dataclass
class VerificationReport:
    passed: bool
    violations: list[dict]
    min_obstacle_clearance: float
    max_jump: list[float]
    max_endpoint_error: float
    samples: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": self.violations[:50],
            "violation_count": len(self.violations),
            "min_obstacle_clearance": self.min_obstacle_clearance,
            "max_jump": self.max_jump,
            "max_endpoint_error": self.max_endpoint_error,
            "samples": self.samples,
        }

    def first(self) -> dict | None:
        return self.violations[0] if self.violations else None


def verify(bundle: TrajectoryBundle, vmap: VoxelMap, agents: Sequence[AgentSpec], config: PlannerConfig) -> VerificationReport:
    """Sampled safety, continuity and endpoint checks.

    Obstacles: the Euclidean distance from every sampled centre to every
    occupied voxel must be at least the agent radius, and the sphere must stay
    inside the map. Pairs: the relative position must avoid the open box with
    half-extents ``(R, R, c_dw R)``, ``R = r_i + r_j``.
    """
    dt = config.sample_dt
    knots = bundle.knots
    t = np.append(bundle.sample_times(dt), knots[-1])
    t = np.unique(t)
    viol: list[dict] = []
    pos = np.stack([_raw_eval(bundle.controls[k], knots, t) for k in range(len(agents))]) if len(agents) else np.zeros((0, len(t), 3))
    vlo, vhi = _occupied_cells(vmap)
    blo = vmap.origin
    bhi = vmap.origin + vmap.voxel_size * np.asarray(vmap.dims)
    min_clear = np.inf
    for k, a in enumerate(agents):
        p = pos[k]
        out = np.any(p - a.radius < blo - 1e-9, axis=1) | np.any(p + a.radius > bhi + 1e-9, axis=1)
        for s in np.flatnonzero(out)[:1]:
            viol.append({"kind": "bounds", "t": float(t[s]), "agents": [a.id]})
        if len(vlo):
            # Prune voxels far from this agent's path (kept generous so the clearance figure is meaningful).
            reach = a.radius + _CLEARANCE_WINDOW
            near = np.all((vhi > p.min(0) - reach) & (vlo < p.max(0) + reach), axis=1)
            lo_n, hi_n = vlo[near], vhi[near]
            for s0 in range(0, len(t), 512):
                ps = p[s0 : s0 + 512]
                if len(lo_n) == 0:
                    break
                d = np.maximum(np.maximum(lo_n[None] - ps[:, None], ps[:, None] - hi_n[None]), 0.0)
                dist = np.sqrt(np.sum(d * d, axis=2)).min(axis=1)
                min_clear = min(min_clear, float(dist.min()))
                bad = np.flatnonzero(dist < a.radius - 1e-9)
                if len(bad):
                    viol.append({"kind": "obstacle", "t": float(t[s0 + bad[0]]), "agents": [a.id], "clearance": float(dist[bad[0]])})
                    break
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            R = agents[i].radius + agents[j].radius
            ext = np.array([R, R, config.downwash * R])
            d = np.abs(pos[j] - pos[i])
            inside = np.all(d < ext - 1e-9, axis=1)
            if inside.any():
                s = int(np.flatnonzero(inside)[0])
                viol.append({"kind": "inter_collision", "t": float(t[s]), "agents": [agents[i].id, agents[j].id]})
    jumps = [0.0, 0.0, 0.0]
    end_err = 0.0
    M = bundle.controls.shape[1] if len(agents) else 0
    for k, a in enumerate(agents):
        c = bundle.controls[k]
        for m in range(M - 1):
            h0, h1 = knots[m + 1] - knots[m], knots[m + 2] - knots[m + 1]
            left = _endpoint_derivs(c[m], h0, True, 2)
            right = _endpoint_derivs(c[m + 1], h1, False, 2)
            for r in range(3):
                jump = float(np.max(np.abs(left[r] - right[r])))
                jumps[r] = max(jumps[r], jump)
                if jump > CONTINUITY_TOL:
                    viol.append({"kind": "continuity", "order": r, "t": float(knots[m + 1]), "agents": [a.id], "jump": jump})
        first = _endpoint_derivs(c[0], knots[1] - knots[0], False, 2)
        last = _endpoint_derivs(c[-1], knots[-1] - knots[-2], True, 2)
        errs = [
            np.max(np.abs(first[0] - np.asarray(a.start))), np.max(np.abs(last[0] - np.asarray(a.goal))),
            np.max(np.abs(first[1])), np.max(np.abs(first[2])), np.max(np.abs(last[1])), np.max(np.abs(last[2])),
        ]
        e = float(max(errs))
        end_err = max(end_err, e)
        if e > ENDPOINT_TOL:
            viol.append({"kind": "endpoint", "t": float(knots[-1]), "agents": [a.id], "error": e})
    viol.sort(key=lambda v: (v["t"], v["agents"]))
    return VerificationReport(not viol, viol, float(min_clear), jumps, end_err, len(t))


def write_csv(bundle: TrajectoryBundle, path: str | Path, dt: float) -> int:
    """Sampled states, one row per agent per sample; returns the row count."""
    t = bundle.sample_times(dt)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "agent_id", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az"])
        for k, a in enumerate(bundle.agents):
            tr = bundle.trajectory(k)
            p, v, acc = tr.evaluate(t), tr.evaluate(t, 1), tr.evaluate(t, 2)
            for s in range(len(t)):
                w.writerow([f"{t[s]:.6f}", a.id, *(f"{x:.9g}" for x in (*p[s], *v[s], *acc[s]))])
                rows += 1
    return rows


def plan_document(
    bundle: TrajectoryBundle,
    config: PlannerConfig,
    solver_stats: dict | None = None,
    corridors: list | None = None,
    extra: dict | None = None,
) -> dict:
    doc = {"format": "rsfcplan-plan", "version": 1, **bundle.to_dict(), "config": config.to_dict()}
    doc["solver"] = solver_stats or {}
    if corridors is not None:
        doc["corridors"] = corridors
    if extra:
        doc.update(extra)
    return doc


def write_plan_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_plan_json(path: str | Path) -> tuple[TrajectoryBundle, PlannerConfig, dict]:
    doc = json.loads(Path(path).read_text())
    return TrajectoryBundle.from_dict(doc), PlannerConfig.from_dict(doc.get("config")), doc


_PALETTE = (
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45",
    "#469990", "#9a6324", "#800000", "#808000", "#000075", "#a9a9a9", "#e6beff", "#ffe119",
)


def render_svg(
    vmap: VoxelMap,
    bundle: TrajectoryBundle | None = None,
    corridors: Sequence[dict] | None = None,
    dt: float = 0.05,
    px_per_m: float = 60.0,
) -> str:
    """Top-down SVG: obstacle columns, translucent corridors, one polyline per agent."""
    lo = vmap.origin
    hi = vmap.origin + vmap.voxel_size * np.asarray(vmap.dims)
    W, H = (hi[:2] - lo[:2]) * px_per_m

    def X(x):
        return (x - lo[0]) * px_per_m

    def Y(y):
        return (hi[1] - y) * px_per_m

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.1f}" height="{H:.1f}" viewBox="0 0 {W:.1f} {H:.1f}">',
        f'<rect x="0" y="0" width="{W:.1f}" height="{H:.1f}" fill="white" stroke="black"/>',
        '<g id="obstacles" fill="#808080">',
    ]
    cols = np.argwhere(vmap.occupancy.any(axis=2))
    vs = vmap.voxel_size
    for i, j in cols:
        x0, y1 = lo[0] + vs * i, lo[1] + vs * (j + 1)
        out.append(f'<rect x="{X(x0):.2f}" y="{Y(y1):.2f}" width="{vs * px_per_m:.2f}" height="{vs * px_per_m:.2f}"/>')
    out.append("</g>")
    if corridors:
        out.append('<g id="corridors" fill-opacity="0.08" stroke-opacity="0.3">')
        for entry in corridors:
            color = _PALETTE[int(entry.get("agent", 0)) % len(_PALETTE)]
            for c in entry["corridors"]:
                b0, b1 = np.asarray(c["min"]), np.asarray(c["max"])
                out.append(
                    f'<rect x="{X(b0[0]):.2f}" y="{Y(b1[1]):.2f}" width="{(b1[0] - b0[0]) * px_per_m:.2f}" '
                    f'height="{(b1[1] - b0[1]) * px_per_m:.2f}" fill="{color}" stroke="{color}"/>'
                )
        out.append("</g>")
    if bundle is not None and len(bundle.agents):
        out.append('<g id="trajectories" fill="none" stroke-width="2">')
        t = np.append(bundle.sample_times(dt), bundle.knots[-1])
        for k, a in enumerate(bundle.agents):
            color = _PALETTE[a.id % len(_PALETTE)]
            p = bundle.trajectory(k).evaluate(t)
            pts = " ".join(f"{X(x):.2f},{Y(y):.2f}" for x, y in p[:, :2])
            out.append(f'<polyline id="agent-{a.id}" points="{pts}" stroke="{color}"/>')
        out.append("</g>")
        out.append('<g id="markers">')
        for a in bundle.agents:
            color = _PALETTE[a.id % len(_PALETTE)]
            sx, sy = X(a.start[0]), Y(a.start[1])
            gx, gy = X(a.goal[0]), Y(a.goal[1])
            out.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="5" fill="{color}"><title>{escape(f"start {a.id}")}</title></circle>')
            out.append(
                f'<rect x="{gx - 5:.2f}" y="{gy - 5:.2f}" width="10" height="10" fill="none" stroke="{color}">'
                f'<title>{escape(f"goal {a.id}")}</title></rect>'
            )
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
