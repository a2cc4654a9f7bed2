"""Relative safe flight corridors between agent pairs.

Each pair's relative grid path is covered by a sequence of axis half-spaces
chosen greedily from the end of the path backwards, so that consecutive
half-spaces are never opposite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import RsfcError
from .mapf import DiscretePlan
from .scenario import AgentSpec, PlannerConfig

DIRECTIONS = ("+x", "+y", "+z", "-x", "-y", "-z")
NORMALS = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float)
# Greedy ties go to the lowest axis; opposite directions can never tie
# (they cannot both hold at one waypoint), so this keeps (i, j) and (j, i) mirror images.
_TIE_ORDER = np.array([0, 3, 1, 4, 2, 5])


def opposite(d: int) -> int:
    return (d + 3) % 6


def direction_index(name: str) -> int:
    return DIRECTIONS.index(name)


@dataclass(frozen=True)
class HalfSpace:
    direction: str
    margin: float

    @property
    def index(self) -> int:
        return DIRECTIONS.index(self.direction)

    @property
    def normal(self) -> np.ndarray:
        return NORMALS[self.index]

    @property
    def axis(self) -> int:
        return self.index % 3

    @property
    def sign(self) -> float:
        return 1.0 if self.index < 3 else -1.0

    def contains(self, p: Sequence[float]) -> bool:
        return float(np.dot(p, self.normal)) > self.margin

    def selects(self, p: Sequence[float]) -> bool:
        """Candidate selection test: ``p . n > 0``."""
        return float(np.dot(p, self.normal)) > 0.0

    def negated(self) -> "HalfSpace":
        return HalfSpace(DIRECTIONS[opposite(self.index)], self.margin)


def halfspace_margin(ai: AgentSpec, aj: AgentSpec, direction: str, config: PlannerConfig) -> float:
    r = ai.radius + aj.radius
    return config.downwash * r if direction in ("+z", "-z") else r


def collision_extent(ai: AgentSpec, aj: AgentSpec, config: PlannerConfig) -> np.ndarray:
    """Half-extents of the inter-collision box of relative positions."""
    r = ai.radius + aj.radius
    return np.array([r, r, config.downwash * r])


@dataclass(frozen=True)
class RsfcEntry:
    halfspace: HalfSpace
    covers: tuple[int, int]

    def member(self, k: int, p: np.ndarray) -> bool:
        """Relative waypoint ``k`` may use this half-space (selection test, window of one index)."""
        return self.covers[0] - 1 <= k <= self.covers[1] + 1 and self.halfspace.selects(p)


@dataclass
class RsfcSequence:
    pair: tuple[int, int]
    entries: list[RsfcEntry] = field(default_factory=list)

    @property
    def halfspaces(self) -> list[HalfSpace]:
        return [e.halfspace for e in self.entries]

    @property
    def covers(self) -> list[tuple[int, int]]:
        return [e.covers for e in self.entries]

    @property
    def directions(self) -> list[str]:
        return [e.halfspace.direction for e in self.entries]

    @property
    def transitions(self) -> int:
        return len(self.entries) - 1

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, m: int) -> RsfcEntry:
        return self.entries[m]

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "directions": self.directions,
            "margins": [h.margin for h in self.halfspaces],
            "covers": [list(c) for c in self.covers],
        }


def selection_matrix(rel: np.ndarray) -> np.ndarray:
    """``sat[..., k, d]``: relative waypoint ``k`` satisfies ``p . n_d > 0``."""
    return np.einsum("...i,di->...d", rel, NORMALS) > 0


def run_lengths(sat: np.ndarray) -> np.ndarray:
    """Forward pass: consecutive satisfied waypoints ending at each index, per direction."""
    s = np.zeros(sat.shape, dtype=np.int32)
    s[..., 0, :] = sat[..., 0, :]
    for n in range(1, sat.shape[-2]):
        s[..., n, :] = (s[..., n - 1, :] + 1) * sat[..., n, :]
    return s


def greedy_cover(sat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward greedy pass over a batch of selection matrices.

    ``sat`` has shape ``(P, L, 6)``. Returns ``(assign, ok)`` where
    ``assign[p, k]`` is the direction index covering waypoint ``k`` and
    ``ok[p]`` is false when the pass reached an index with no admissible
    direction (``assign`` is then ``-1`` on the uncovered prefix).
    """
    sat = np.asarray(sat, dtype=bool)
    P, L, _ = sat.shape
    s = run_lengths(sat)
    assign = np.full((P, L), -1, dtype=np.int8)
    ok = np.ones(P, dtype=bool)
    n = np.full(P, L - 1)
    prev = np.full(P, -1)
    active = np.ones(P, dtype=bool)
    cols = np.arange(L)
    while active.any():
        rows = np.flatnonzero(active)
        sn = s[rows, n[rows]].astype(np.int64)
        has_prev = prev[rows] >= 0
        opp = (prev[rows] + 3) % 6
        sn[has_prev, opp[has_prev]] = -1
        best = _TIE_ORDER[np.argmax(sn[:, _TIE_ORDER], axis=1)]
        length = sn[np.arange(len(rows)), best]
        dead = length <= 0
        ok[rows[dead]] = False
        active[rows[dead]] = False
        live = rows[~dead]
        if len(live) == 0:
            break
        bl, ll = best[~dead], length[~dead]
        nl = n[live]
        span = (cols[None, :] > (nl - ll)[:, None]) & (cols[None, :] <= nl[:, None])
        sub = assign[live]
        sub[span] = np.broadcast_to(bl[:, None], span.shape)[span]
        assign[live] = sub
        n[live] = nl - ll
        prev[live] = bl
        active[live] = n[live] >= 0
    return assign, ok


def count_transitions(assign: np.ndarray) -> np.ndarray:
    return np.sum(assign[..., 1:] != assign[..., :-1], axis=-1)


def _runs(assign_row: np.ndarray) -> list[tuple[int, int, int]]:
    out = []
    start = 0
    for k in range(1, len(assign_row) + 1):
        if k == len(assign_row) or assign_row[k] != assign_row[start]:
            out.append((int(assign_row[start]), start, k - 1))
            start = k
    return out


def relative_waypoints(plan: DiscretePlan, i: int, j: int) -> np.ndarray:
    return plan.waypoints[plan.index_of(j)] - plan.waypoints[plan.index_of(i)]


def _sequence_from(assign_row, pair, ai, aj, config) -> RsfcSequence:
    entries = []
    for d, a, b in _runs(assign_row):
        name = DIRECTIONS[d]
        entries.append(RsfcEntry(HalfSpace(name, halfspace_margin(ai, aj, name, config)), (a, b)))
    return RsfcSequence(pair, entries)


def _check_relative(rel: np.ndarray, pairs: Sequence[tuple[int, int]]) -> None:
    zero = np.all(np.abs(rel) < 1e-12, axis=-1)
    if zero.any():
        p, k = np.argwhere(zero)[0]
        raise RsfcError("zero_relative_waypoint", f"pair {pairs[p]} coincides at waypoint {k}")


def build_rsfc(plan: DiscretePlan, i: int, j: int, config: PlannerConfig) -> RsfcSequence:
    """Half-space sequence for agents ``i`` and ``j`` (ids), relative path ``p_j - p_i``."""
    return build_all_rsfc(plan, config, pairs=[(i, j)])[(i, j)]


def build_all_rsfc(
    plan: DiscretePlan,
    config: PlannerConfig,
    pairs: Sequence[tuple[int, int]] | None = None,
) -> dict[tuple[int, int], RsfcSequence]:
    """RSFC sequences for the given id pairs (default: every ``i < j`` in agent order)."""
    ids = [a.id for a in plan.agents]
    if pairs is None:
        pairs = [(ids[a], ids[b]) for a in range(len(ids)) for b in range(a + 1, len(ids))]
    if not pairs:
        return {}
    ix = np.array([[plan.index_of(i), plan.index_of(j)] for i, j in pairs])
    rel = plan.waypoints[ix[:, 1]] - plan.waypoints[ix[:, 0]]
    _check_relative(rel, pairs)
    assign, ok = greedy_cover(selection_matrix(rel))
    if not ok.all():
        p = int(np.flatnonzero(~ok)[0])
        raise RsfcError("no_admissible_direction", f"pair {pairs[p]}: greedy cover reached a dead end")
    out = {}
    for p, (i, j) in enumerate(pairs):
        out[(i, j)] = _sequence_from(assign[p], (i, j), plan.agents[ix[p, 0]], plan.agents[ix[p, 1]], config)
    return out
