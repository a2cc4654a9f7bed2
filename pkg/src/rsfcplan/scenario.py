"""Occupancy map, agent missions, planner settings and scenario I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ScenarioError

# Tolerances are in voxel units for index math and metres for bound checks.
_IDX_EPS = 1e-9
_BOUND_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))

    @classmethod
    def around(cls, center: Sequence[float], half: float | Sequence[float]) -> "Box":
        c = np.asarray(center, dtype=float)
        h = np.broadcast_to(np.asarray(half, dtype=float), (3,))
        return cls(c - h, c + h)

    @classmethod
    def hull(cls, *points: Sequence[float]) -> "Box":
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def is_valid(self) -> bool:
        return bool(np.all(self.lo <= self.hi))

    def inflate(self, amount: float) -> "Box":
        return Box(self.lo - amount, self.hi + amount)

    def contains(self, p: Sequence[float], tol: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def contains_box(self, other: "Box", tol: float = 1e-12) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def intersects(self, other: "Box", tol: float = 1e-12) -> bool:
        return bool(np.all(self.lo <= other.hi + tol) and np.all(other.lo <= self.hi + tol))

    def union_hull(self, other: "Box") -> "Box":
        return Box(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(d["min"], d["max"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Box):
            return NotImplemented
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __repr__(self) -> str:
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


class VoxelMap:
    """Dense boolean occupancy grid, immutable after construction.

    Voxel ``(i, j, k)`` spans ``origin + voxel_size * [i, i+1] x [j, j+1] x [k, k+1]``.
    A box collides with a voxel only when they overlap with positive volume,
    so touching a voxel face is not a collision.
    """

    def __init__(
        self,
        origin: Sequence[float],
        voxel_size: float,
        dims: Sequence[int],
        occupancy: np.ndarray | None = None,
        boxes: Iterable[Box] = (),
    ):
        if voxel_size <= 0:
            raise ScenarioError("bad_map", "voxel_size must be positive")
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ScenarioError("bad_map", f"dims must be 3 positive integers, got {dims}")
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = dims
        self.boxes = tuple(boxes)
        if occupancy is None:
            occupancy = np.zeros(dims, dtype=bool)
            for b in self.boxes:
                sl = self.index_slices(b)
                if sl is not None:
                    occupancy[sl] = True
        occupancy = np.asarray(occupancy, dtype=bool)
        if occupancy.shape != dims:
            raise ScenarioError("bad_map", f"occupancy shape {occupancy.shape} != dims {dims}")
        occupancy.setflags(write=False)
        self.occupancy = occupancy

    @property
    def bounds(self) -> Box:
        return Box(self.origin, self.origin + self.voxel_size * np.asarray(self.dims))

    @cached_property
    def _prefix(self) -> np.ndarray:
        s = np.zeros(tuple(d + 1 for d in self.dims), dtype=np.int64)
        s[1:, 1:, 1:] = self.occupancy.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
        return s

    def count_occupied(self, i0: int, i1: int, j0: int, j1: int, k0: int, k1: int) -> int:
        """Occupied voxels in the half-open index box ``[i0,i1) x [j0,j1) x [k0,k1)``."""
        if i0 >= i1 or j0 >= j1 or k0 >= k1:
            return 0
        s = self._prefix
        return int(
            s[i1, j1, k1] - s[i0, j1, k1] - s[i1, j0, k1] - s[i1, j1, k0]
            + s[i0, j0, k1] + s[i0, j1, k0] + s[i1, j0, k0] - s[i0, j0, k0]
        )

    def index_range(self, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Half-open voxel index range of voxels overlapping ``[lo, hi]`` with positive volume."""
        a = (np.asarray(lo) - self.origin) / self.voxel_size
        b = (np.asarray(hi) - self.origin) / self.voxel_size
        i0 = np.floor(a + _IDX_EPS).astype(int)
        i1 = np.ceil(b - _IDX_EPS).astype(int)
        dims = np.asarray(self.dims)
        return np.clip(i0, 0, dims), np.clip(i1, 0, dims)

    def index_slices(self, box: Box) -> tuple[slice, slice, slice] | None:
        i0, i1 = self.index_range(box.lo, box.hi)
        if np.any(i0 >= i1):
            return None
        return tuple(slice(int(a), int(b)) for a, b in zip(i0, i1))  # type: ignore[return-value]

    def box_in_free_space(self, box: Box, inflation: float = 0.0) -> bool:
        return box_in_free_space(self, box, inflation)

    def occupied_boxes(self) -> list[Box]:
        """Occupied voxels merged into runs along z, for serialization and plotting."""
        out = []
        vs = self.voxel_size
        for i, j in zip(*np.nonzero(self.occupancy.any(axis=2))):
            col = self.occupancy[i, j]
            k = 0
            while k < len(col):
                if col[k]:
                    k0 = k
                    while k < len(col) and col[k]:
                        k += 1
                    lo = self.origin + vs * np.array([i, j, k0])
                    hi = self.origin + vs * np.array([i + 1, j + 1, k])
                    out.append(Box(lo, hi))
                else:
                    k += 1
        return out

    def to_dict(self) -> dict:
        boxes = self.boxes if self.boxes else self.occupied_boxes()
        return {
            "origin": self.origin.tolist(),
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
            "boxes": [b.to_dict() for b in boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelMap":
        try:
            boxes = [Box.from_dict(b) for b in d.get("boxes", [])]
            return cls(d["origin"], float(d["voxel_size"]), d["dims"], boxes=boxes)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError("bad_map", f"malformed map: {exc}") from exc


def box_in_free_space(vmap: VoxelMap, box: Box, inflation: float = 0.0) -> bool:
    """True iff ``box`` grown by ``inflation`` on every face stays inside the
    map bounds and overlaps no occupied voxel."""
    lo = box.lo - inflation
    hi = box.hi + inflation
    bounds = vmap.bounds
    if np.any(lo < bounds.lo - _BOUND_EPS) or np.any(hi > bounds.hi + _BOUND_EPS):
        return False
    i0, i1 = vmap.index_range(lo, hi)
    return vmap.count_occupied(i0[0], i1[0], i0[1], i1[1], i0[2], i1[2]) == 0


@dataclass(frozen=True)
class AgentSpec:
    id: int
    radius: float
    start: tuple[float, float, float]
    goal: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"id": self.id, "radius": self.radius, "start": list(self.start), "goal": list(self.goal)}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        try:
            return cls(
                int(d["id"]),
                float(d["radius"]),
                tuple(float(v) for v in d["start"]),  # type: ignore[arg-type]
                tuple(float(v) for v in d["goal"]),  # type: ignore[arg-type]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError("bad_scenario", f"malformed agent entry: {exc}") from exc


@dataclass(frozen=True)
class PlannerConfig:
    """Planner settings.

    ``v_max`` and ``a_max`` default to values plausible for a small
    Crazyflie-class quadrotor; the initial corridor size defaults to one
    horizontal grid step. ``continuity`` is the highest derivative kept
    continuous across knots (2 = acceleration).
    """

    downwash: float = 2.0
    ecbs_bound: float = 1.3
    grid_xy: float = 0.5
    grid_z: float = 1.0
    degree: int = 5
    deriv_order: int = 3
    t_step: float = 1.0
    v_max: float = 1.7
    a_max: float = 6.0
    init_box_size: float = 0.5
    sample_dt: float = 0.01
    continuity: int = 2
    time_delay: bool = True
    mapf_budget: int = 200_000
    qp_eps: float = 1e-6
    qp_max_iter: int = 20_000
    scale_margin: float = 0.05
    corridor_tightening: float = 0.0

    def __post_init__(self) -> None:
        problems = []
        if self.downwash < 1:
            problems.append("downwash must be >= 1")
        if self.ecbs_bound < 1:
            problems.append("ecbs_bound must be >= 1")
        for name in ("grid_xy", "grid_z", "t_step", "v_max", "a_max", "init_box_size", "sample_dt"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.degree < 3:
            problems.append("degree must be >= 3")
        if self.degree < 2 * (self.continuity + 1) - 1:
            problems.append("degree too low for the boundary and continuity conditions")
        if not 0 < self.deriv_order <= self.degree:
            problems.append("deriv_order must be in 1..degree")
        if problems:
            raise ScenarioError("bad_config", "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PlannerConfig":
        d = dict(d or {})
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ScenarioError("bad_config", f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs = {}
            for k, v in d.items():
                default = getattr(cls, k)
                kwargs[k] = type(default)(v)
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ScenarioError("bad_config", str(exc)) from exc


@dataclass
class Scenario:
    vmap: VoxelMap
    agents: list[AgentSpec]
    config: PlannerConfig = field(default_factory=PlannerConfig)


def validate_scenario(vmap: VoxelMap, agents: Sequence[AgentSpec]) -> None:
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate_id", "agent ids must be distinct")
    for a in agents:
        if not a.radius > 0:
            raise ScenarioError("bad_radius", f"agent {a.id}: radius must be positive")
        for label, p in (("start", a.start), ("goal", a.goal)):
            if not vmap.bounds.contains(p, tol=0.0):
                raise ScenarioError(f"{label}_out_of_bounds", f"agent {a.id}: {label} {p} outside map")
            if not box_in_free_space(vmap, Box(p, p), a.radius):
                raise ScenarioError(f"{label}_in_collision", f"agent {a.id}: {label} in collision")


def read_json(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError("parse_error", f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("parse_error", f"{path}: top level must be an object")
    return data


def parse_scenario(data: dict) -> tuple[list[AgentSpec], PlannerConfig]:
    if "agents" not in data or not isinstance(data["agents"], list):
        raise ScenarioError("bad_scenario", "scenario needs an 'agents' list")
    agents = [AgentSpec.from_dict(a) for a in data["agents"]]
    return agents, PlannerConfig.from_dict(data.get("config"))


def load_scenario(map_file: str | Path, scenario_file: str | Path) -> tuple[VoxelMap, list[AgentSpec], PlannerConfig]:
    vmap = VoxelMap.from_dict(read_json(map_file))
    agents, config = parse_scenario(read_json(scenario_file))
    validate_scenario(vmap, agents)
    return vmap, agents, config


def write_scenario(
    map_file: str | Path,
    scenario_file: str | Path,
    vmap: VoxelMap,
    agents: Sequence[AgentSpec],
    config: PlannerConfig | None = None,
) -> None:
    Path(map_file).write_text(json.dumps(vmap.to_dict(), indent=1), encoding="utf-8")
    payload: dict = {"agents": [a.to_dict() for a in agents]}
    if config is not None:
        payload["config"] = config.to_dict()
    Path(scenario_file).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def perimeter_slots(half_side: float, step: float) -> list[tuple[float, float]]:
    """Grid points on the square ``|x| = half_side or |y| = half_side``, counter-clockwise."""
    n = int(round(half_side / step))
    pts = []
    for k in range(-n, n):
        pts.append((k * step, -n * step))
    for k in range(-n, n):
        pts.append((n * step, k * step))
    for k in range(n, -n, -1):
        pts.append((k * step, n * step))
    for k in range(n, -n, -1):
        pts.append((-n * step, k * step))
    return pts


def generate_forest_scenario(
    seed: int,
    n_agents: int,
    n_pillars: int = 30,
    *,
    radius: float = 0.15,
    size: tuple[float, float, float] = (10.0, 10.0, 2.5),
    voxel_size: float = 0.1,
    pillar_width: float = 0.3,
    pillar_height: tuple[float, float] = (1.0, 2.5),
    start_inset: float = 1.0,
    height: float = 1.0,
    grid_xy: float = 0.5,
    max_tries: int = 10_000,
    keep_out: float | None = None,
) -> tuple[VoxelMap, list[AgentSpec]]:
    """Random pillar forest with agents spread along the boundary.

    Starts sit on grid points of a square ``start_inset`` metres inside the
    walls, evenly spaced with a seed-dependent phase, at ``height``. Each goal
    is the point reflection of its start through the map centre. Pillars never
    come within ``keep_out`` (default ``radius + grid_xy / 2``) of a start or
    goal; fixing it makes the map independent of ``radius``.
    """
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    origin = (-sx / 2, -sy / 2, 0.0)
    dims = tuple(int(round(s / voxel_size)) for s in size)

    half_side = min(sx, sy) / 2 - start_inset
    slots = perimeter_slots(half_side, grid_xy)
    if n_agents > len(slots):
        raise ScenarioError("placement_failed", f"at most {len(slots)} agents fit on the boundary")
    phase = int(rng.integers(len(slots)))
    picks = sorted({(phase + int(round(k * len(slots) / n_agents))) % len(slots) for k in range(n_agents)})
    if len(picks) != n_agents:
        raise ScenarioError("placement_failed", "boundary slots collide")
    agents = []
    for i, s in enumerate(picks):
        x, y = slots[s]
        agents.append(AgentSpec(i, radius, (x, y, height), (-x + 0.0, -y + 0.0, height)))

    if keep_out is None:
        keep_out = radius + grid_xy / 2
    endpoints = np.array([a.start for a in agents] + [a.goal for a in agents])
    pillars: list[Box] = []
    tries = 0
    while len(pillars) < n_pillars:
        tries += 1
        if tries > max_tries:
            raise ScenarioError("placement_failed", f"could only place {len(pillars)} pillars")
        cx = rng.uniform(origin[0] + pillar_width / 2, origin[0] + sx - pillar_width / 2)
        cy = rng.uniform(origin[1] + pillar_width / 2, origin[1] + sy - pillar_width / 2)
        h = rng.uniform(*pillar_height)
        pillar = Box((cx - pillar_width / 2, cy - pillar_width / 2, 0.0), (cx + pillar_width / 2, cy + pillar_width / 2, h))
        grown = pillar.inflate(keep_out)
        if any(grown.contains(p, tol=0.0) for p in endpoints):
            continue
        pillars.append(pillar)
    return VoxelMap(origin, voxel_size, dims, boxes=pillars), agents


def empty_map(size: tuple[float, float, float] = (10.0, 10.0, 2.5), voxel_size: float = 0.1) -> VoxelMap:
    origin = (-size[0] / 2, -size[1] / 2, 0.0)
    return VoxelMap(origin, voxel_size, tuple(int(round(s / voxel_size)) for s in size))


def nearly_equal(a: float, b: float, tol: float = 1e-9) -> bool:
    return math.isclose(a, b, abs_tol=tol)
