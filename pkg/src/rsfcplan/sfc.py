"""Safe flight corridors: overlapping obstacle-free boxes along each agent's grid path."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CorridorError
from .mapf import DiscretePlan
from .scenario import Box, PlannerConfig, VoxelMap, box_in_free_space

# Face order for the greedy expansion: (axis, side) with side 1 = upper face.
FACE_ORDER = ((0, 1), (0, 0), (1, 1), (1, 0), (2, 1), (2, 0))
_EPS = 1e-9


@dataclass(frozen=True)
class Corridor:
    box: Box
    covers: tuple[int, int]  # inclusive waypoint index range

    def member(self, k: int, p: np.ndarray) -> bool:
        """Waypoint ``k`` may use this corridor: inside the box and within one index of its cover."""
        return self.covers[0] - 1 <= k <= self.covers[1] and self.box.contains(p)

    def to_dict(self) -> dict:
        return {**self.box.to_dict(), "covers": list(self.covers)}

    @classmethod
    def from_dict(cls, d: dict) -> "Corridor":
        return cls(Box.from_dict(d), (int(d["covers"][0]), int(d["covers"][1])))


@dataclass
class CorridorSequence:
    agent: int
    corridors: list[Corridor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.corridors)

    def __getitem__(self, m: int) -> Corridor:
        return self.corridors[m]

    def to_dict(self) -> dict:
        return {"agent": self.agent, "corridors": [c.to_dict() for c in self.corridors]}

    @classmethod
    def from_dict(cls, d: dict) -> "CorridorSequence":
        return cls(int(d["agent"]), [Corridor.from_dict(c) for c in d["corridors"]])


class _Expander:
    """Greedy face expansion in voxel units of the inflated box."""

    def __init__(self, vmap: VoxelMap, radius: float):
        self.vmap = vmap
        self.r = radius
        self.dims = vmap.dims
        self.cache: dict[tuple, Box] = {}

    def _units(self, box: Box) -> list[list[float]]:
        vs = self.vmap.voxel_size
        lo = (box.lo - self.r - self.vmap.origin) / vs
        hi = (box.hi + self.r - self.vmap.origin) / vs
        return [[float(a), float(b)] for a, b in zip(lo, hi)]

    def _free(self, u: list[list[float]]) -> bool:
        rng = []
        for axis in range(3):
            a, b = u[axis]
            if a < -_EPS or b > self.dims[axis] + _EPS:
                return False
            rng += [max(math.floor(a + _EPS), 0), min(math.ceil(b - _EPS), self.dims[axis])]
        return self.vmap.count_occupied(*rng) == 0

    def expand(self, box: Box) -> Box:
        key = (tuple(box.lo), tuple(box.hi))
        if key in self.cache:
            return self.cache[key]
        u = self._units(box)
        open_faces = [True] * 6
        while any(open_faces):
            for f, (axis, side) in enumerate(FACE_ORDER):
                if not open_faces[f]:
                    continue
                old = u[axis][side]
                if side:
                    new = math.floor(old + _EPS) + 1.0
                else:
                    new = math.ceil(old - _EPS) - 1.0
                u[axis][side] = new
                if not self._free(u):
                    u[axis][side] = old
                    open_faces[f] = False
        vs = self.vmap.voxel_size
        lo = self.vmap.origin + vs * np.array([a for a, _ in u]) + self.r
        hi = self.vmap.origin + vs * np.array([b for _, b in u]) - self.r
        # Faces that never moved keep their exact input value.
        lo = np.where(np.isclose(lo, box.lo, rtol=0, atol=1e-12), box.lo, lo)
        hi = np.where(np.isclose(hi, box.hi, rtol=0, atol=1e-12), box.hi, hi)
        out = Box(np.minimum(lo, box.lo), np.maximum(hi, box.hi))
        self.cache[key] = out
        return out


def _seed_box(vmap: VoxelMap, p: np.ndarray, prev: np.ndarray | None, radius: float, size: float) -> Box:
    init = Box.around(p, size / 2)
    candidates = [init.union_hull(Box(prev, prev)) if prev is not None else init]
    candidates.append(Box.hull(p, prev) if prev is not None else Box(p, p))
    for c in candidates:
        if box_in_free_space(vmap, c, radius):
            return c
    raise CorridorError("waypoint_in_collision", f"no free seed box at {p.tolist()}")


def dedup_corridors(corridors: Sequence[Corridor]) -> list[Corridor]:
    """Drop corridors contained in a neighbour, merging their cover ranges."""
    out: list[Corridor] = []
    for c in corridors:
        if out and out[-1].box.contains_box(c.box):
            last = out[-1]
            out[-1] = Corridor(last.box, (last.covers[0], c.covers[1]))
            continue
        while out and c.box.contains_box(out[-1].box):
            c = Corridor(c.box, (out[-1].covers[0], c.covers[1]))
            out.pop()
        out.append(c)
    return out


def build_sfc(
    vmap: VoxelMap,
    plan: DiscretePlan,
    agent: int,
    config: PlannerConfig,
    expander: _Expander | None = None,
) -> CorridorSequence:
    """Axis-search corridors for one agent (``agent`` is the agent id)."""
    k_agent = plan.index_of(agent)
    radius = plan.agents[k_agent].radius
    pts = plan.waypoints[k_agent]
    expander = expander or _Expander(vmap, radius)
    raw = []
    for k, p in enumerate(pts):
        prev = pts[k - 1] if k > 0 else None
        if prev is not None and np.array_equal(prev, p):
            prev = None
        seed = _seed_box(vmap, p, prev, radius, config.init_box_size)
        raw.append(Corridor(expander.expand(seed), (k, k)))
    return CorridorSequence(agent, dedup_corridors(raw))


def build_all_sfc(vmap: VoxelMap, plan: DiscretePlan, config: PlannerConfig) -> list[CorridorSequence]:
    expanders: dict[float, _Expander] = {}
    out = []
    for a in plan.agents:
        ex = expanders.setdefault(a.radius, _Expander(vmap, a.radius))
        out.append(build_sfc(vmap, plan, a.id, config, ex))
    return out


def check_sfc(seq: CorridorSequence, vmap: VoxelMap, plan: DiscretePlan) -> list[str]:
    """Re-verify obstacle clearance, overlap and coverage by a direct voxel scan."""
    issues = []
    k_agent = plan.index_of(seq.agent)
    r = plan.agents[k_agent].radius
    pts = plan.waypoints[k_agent]
    occ = np.argwhere(vmap.occupancy)
    vlo = vmap.origin + vmap.voxel_size * occ
    vhi = vlo + vmap.voxel_size
    blo, bhi = vmap.origin, vmap.origin + vmap.voxel_size * np.asarray(vmap.dims)
    for m, c in enumerate(seq.corridors):
        lo, hi = c.box.lo - r, c.box.hi + r
        if np.any(c.box.lo > c.box.hi):
            issues.append(f"corridor {m}: malformed box")
        if np.any(lo < blo - 1e-9) or np.any(hi > bhi + 1e-9):
            issues.append(f"corridor {m}: leaves map bounds (1a)")
        if len(occ):
            overlap = np.all((vlo < hi - 1e-9) & (vhi > lo + 1e-9), axis=1)
            if overlap.any():
                issues.append(f"corridor {m}: inflated box hits {int(overlap.sum())} occupied voxels (1a)")
        a, b = c.covers
        for k in range(a, b + 1):
            if not (0 <= k < len(pts)) or np.any(pts[k] < c.box.lo - 1e-9) or np.any(pts[k] > c.box.hi + 1e-9):
                issues.append(f"corridor {m}: waypoint {k} not inside")
    for m in range(len(seq.corridors) - 1):
        p, q = seq.corridors[m].box, seq.corridors[m + 1].box
        if np.any(np.maximum(p.lo, q.lo) > np.minimum(p.hi, q.hi) + 1e-12):
            issues.append(f"corridors {m} and {m + 1} do not intersect (1b)")
    covered = [k for c in seq.corridors for k in range(c.covers[0], c.covers[1] + 1)]
    if covered != list(range(len(pts))):
        issues.append("covers ranges are not a contiguous partition of the waypoints")
    return issues
