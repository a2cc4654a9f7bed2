"""Discrete initial trajectories: 3D grid graph and bounded-suboptimal ECBS.

The grid is 6-connected with wait actions. Grid points sit at integer
multiples of ``(grid_xy, grid_xy, grid_z)`` inside the map bounds. A node
is usable by an agent when the agent's clearance box at that node is free;
an edge additionally needs the clearance box swept along the move to be free.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import MapfError
from .scenario import AgentSpec, Box, PlannerConfig, VoxelMap, box_in_free_space

_SNAP_TOL = 1e-9
_PAIR_CAP = 20_000  # joint expansions per agent pair for the node bound
_MERGE_AFTER = 8  # conflicts between two groups before they are planned jointly
_MERGE_STATES = 50_000  # largest product of usable node counts in a merged group
_MOVES = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass
class Mobility:
    """Per-radius view of the grid: usable nodes and adjacency (wait included)."""

    free: np.ndarray
    nbrs: list[tuple[int, ...]]

    def distances_to(self, goal: int) -> np.ndarray:
        """BFS hop distance to ``goal``; -1 where unreachable."""
        dist = np.full(len(self.free), -1, dtype=np.int64)
        if not self.free[goal]:
            return dist
        dist[goal] = 0
        q = deque([goal])
        while q:
            v = q.popleft()
            for w in self.nbrs[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    q.append(w)
        return dist


class GridGraph:
    """Regular grid over the map; mobility is computed lazily per agent radius."""

    def __init__(self, index_lo: Sequence[int], shape: Sequence[int], steps: Sequence[float], vmap: VoxelMap | None = None,
                 free_mask: np.ndarray | None = None):
        self.index_lo = np.asarray(index_lo, dtype=int)
        self.shape = tuple(int(s) for s in shape)
        self.steps = np.asarray(steps, dtype=float)
        self.vmap = vmap
        self._free_mask = None if free_mask is None else np.asarray(free_mask, dtype=bool).reshape(-1)
        self._mobility: dict[float, Mobility] = {}

    @classmethod
    def for_map(cls, vmap: VoxelMap, grid_xy: float, grid_z: float) -> "GridGraph":
        steps = np.array([grid_xy, grid_xy, grid_z])
        b = vmap.bounds
        lo = np.ceil(b.lo / steps - _SNAP_TOL).astype(int)
        hi = np.floor(b.hi / steps + _SNAP_TOL).astype(int)
        return cls(lo, hi - lo + 1, steps, vmap=vmap)

    @classmethod
    def from_mask(cls, mask: np.ndarray, steps: Sequence[float] = (1.0, 1.0, 1.0)) -> "GridGraph":
        """Abstract grid (no map): ``mask[i, j, k]`` marks usable nodes for every radius."""
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[:, :, None]
        return cls((0, 0, 0), mask.shape, steps, free_mask=mask)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def node(self, idx: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(i) for i in idx), self.shape))

    def index(self, node: int) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.unravel_index(node, self.shape))  # type: ignore[return-value]

    def coord(self, node: int) -> np.ndarray:
        return (self.index_lo + np.asarray(self.index(node))) * self.steps

    def coords(self, nodes: Iterable[int]) -> np.ndarray:
        idx = np.array(np.unravel_index(np.asarray(list(nodes), dtype=int), self.shape)).T
        return (self.index_lo + idx) * self.steps

    def nearest(self, p: Sequence[float]) -> int | None:
        idx = np.rint(np.asarray(p, dtype=float) / self.steps).astype(int) - self.index_lo
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            return None
        return self.node(idx)

    def on_grid(self, p: Sequence[float]) -> bool:
        q = np.asarray(p, dtype=float) / self.steps
        return bool(np.all(np.abs(q - np.rint(q)) <= _SNAP_TOL))

    def mobility(self, radius: float) -> Mobility:
        key = float(radius)
        if key not in self._mobility:
            self._mobility[key] = self._build_mobility(key)
        return self._mobility[key]

    def _build_mobility(self, radius: float) -> Mobility:
        n = self.n_nodes
        if self._free_mask is not None:
            free = self._free_mask.copy()
            edge_ok = lambda u, v: True  # noqa: E731
        else:
            assert self.vmap is not None
            pts = self.coords(range(n))
            free = np.array([box_in_free_space(self.vmap, Box(p, p), radius) for p in pts])
            edge_ok = lambda u, v: box_in_free_space(self.vmap, Box.hull(pts[u], pts[v]), radius)  # noqa: E731
        nbrs: list[list[int]] = [[v] if free[v] else [] for v in range(n)]
        shape = np.asarray(self.shape)
        for v in np.flatnonzero(free):
            idx = np.asarray(self.index(int(v)))
            for axis in range(3):
                nxt = idx.copy()
                nxt[axis] += 1
                if nxt[axis] >= shape[axis]:
                    continue
                w = self.node(nxt)
                if free[w] and edge_ok(int(v), w):
                    nbrs[int(v)].append(w)
                    nbrs[w].append(int(v))
        order = {m: k for k, m in enumerate(_MOVES)}

        def move_rank(v: int, w: int) -> int:
            if v == w:
                return -1
            d = tuple(np.asarray(self.index(w)) - np.asarray(self.index(v)))
            return order[d]

        return Mobility(free, [tuple(sorted(ns, key=lambda w, v=v: move_rank(v, w))) for v, ns in enumerate(nbrs)])


class FocalQueue:
    """Open/focal pair used at both ECBS levels.

    Entries carry an integer lower bound ``lb`` (ordering OPEN) and an
    integer admission value ``fv``; an entry is eligible for FOCAL when
    ``fv <= floor(bound * min lb)``. FOCAL pops by ``key``.
    """

    def __init__(self, bound: float):
        self.bound = bound
        self._open: list[tuple[int, int]] = []
        self._focal: list[tuple[tuple, int]] = []
        self._buckets: dict[int, list[int]] = {}
        self._items: dict[int, tuple[int, int, tuple, object]] = {}
        self._in_focal: set[int] = set()
        self._admitted = -1
        self._ids = itertools.count()

    def __len__(self) -> int:
        return len(self._items)

    def _threshold(self, lb_min: int) -> int:
        return int(math.floor(self.bound * lb_min + 1e-9))

    def lb_min(self) -> int:
        while self._open and self._open[0][1] not in self._items:
            heapq.heappop(self._open)
        return self._open[0][0]

    def push(self, item: object, lb: int, fv: int, key: tuple) -> None:
        i = next(self._ids)
        self._items[i] = (lb, fv, key, item)
        heapq.heappush(self._open, (lb, i))
        self._buckets.setdefault(fv, []).append(i)
        if fv <= self._admitted:
            heapq.heappush(self._focal, (key, i))
            self._in_focal.add(i)

    def pop(self) -> tuple[object, int, int]:
        """Return ``(item, lb, lb_min)`` where ``lb_min`` is OPEN's minimum before the pop."""
        lb_min = self.lb_min()
        thr = self._threshold(lb_min)
        if thr > self._admitted:
            for f in range(self._admitted + 1, thr + 1):
                for i in self._buckets.get(f, ()):
                    if i in self._items and i not in self._in_focal:
                        heapq.heappush(self._focal, (self._items[i][2], i))
                        self._in_focal.add(i)
        self._admitted = thr
        while self._focal:
            _, i = heapq.heappop(self._focal)
            if i not in self._items:
                continue
            self._in_focal.discard(i)
            lb, fv, _, item = self._items[i]
            if fv > thr:
                continue
            del self._items[i]
            return item, lb, lb_min
        raise RuntimeError("focal list empty while open list is not")  # pragma: no cover


@dataclass(frozen=True)
class AgentConstraints:
    """Per-agent branch constraints.

    ``vertex``/``edge`` forbid single moves. ``barred`` holds ``(v, t0)``
    pairs forbidding ``v`` at every time ``>= t0``. ``rest_after`` and
    ``rest_by`` bound the time from which the agent stays at its goal.
    """

    vertex: frozenset = frozenset()
    edge: frozenset = frozenset()
    barred: frozenset = frozenset()
    rest_after: int = 0
    rest_by: int | None = None

    def add_vertex(self, v: int, t: int) -> "AgentConstraints":
        return replace(self, vertex=self.vertex | {(v, t)})

    def add_edge(self, u: int, v: int, t: int) -> "AgentConstraints":
        return replace(self, edge=self.edge | {(u, v, t)})

    def add_barrier(self, v: int, t: int) -> "AgentConstraints":
        return replace(self, barred=self.barred | {(v, t)})

    def rest_later_than(self, t: int) -> "AgentConstraints":
        return replace(self, rest_after=max(self.rest_after, t + 1))

    def rest_no_later_than(self, t: int) -> "AgentConstraints":
        return replace(self, rest_by=t if self.rest_by is None else min(self.rest_by, t))

    def max_time(self) -> int:
        ts = [t for _, t in self.vertex] + [t + 1 for _, _, t in self.edge] + [t for _, t in self.barred]
        ts += [self.rest_after] + ([self.rest_by] if self.rest_by is not None else [])
        return max(ts, default=0)


@dataclass
class ConflictTable:
    """Occupancy of the other agents' current paths (conflict avoidance table)."""

    vertex: dict = field(default_factory=dict)
    edge: dict = field(default_factory=dict)
    rest: dict = field(default_factory=dict)

    @classmethod
    def from_paths(cls, paths: Iterable[Sequence[int]]) -> "ConflictTable":
        cat = cls()
        for path in paths:
            for t, v in enumerate(path):
                cat.vertex[(v, t)] = cat.vertex.get((v, t), 0) + 1
                if t + 1 < len(path) and path[t + 1] != v:
                    key = (v, path[t + 1], t)
                    cat.edge[key] = cat.edge.get(key, 0) + 1
            g, tg = path[-1], len(path) - 1
            cat.rest[g] = min(cat.rest.get(g, tg), tg)
        return cat

    def move_cost(self, u: int, v: int, t: int) -> int:
        n = self.vertex.get((v, t + 1), 0) + self.edge.get((v, u, t), 0)
        if v in self.rest and t + 1 > self.rest[v]:
            n += 1
        return n


@dataclass(frozen=True)
class _Rules:
    """Lookup form of one agent's constraints."""

    vertex: frozenset
    edge: frozenset
    barred: dict
    goal: int
    t_rest: int  # earliest time from which the agent may stay at its goal
    deadline: int | None

    @classmethod
    def of(cls, cons: AgentConstraints, goal: int) -> "_Rules":
        barred: dict[int, int] = {}
        for v, t in cons.barred:
            barred[v] = min(barred.get(v, t), t)
        t_rest = max(1 + max((t for v, t in cons.vertex if v == goal), default=-1), cons.rest_after)
        return cls(cons.vertex, cons.edge, barred, goal, t_rest, cons.rest_by)

    def allows(self, v: int, w: int, t: int) -> bool:
        return (w, t + 1) not in self.vertex and (v, w, t) not in self.edge and self.barred.get(w, t + 2) > t + 1

    def allows_start(self, v: int) -> bool:
        return (v, 0) not in self.vertex and self.barred.get(v, 1) > 0

    def can_finish(self, dist_start: int) -> bool:
        if self.goal in self.barred:
            return False
        return self.deadline is None or (self.t_rest <= self.deadline and dist_start <= self.deadline)

    def in_time(self, t: int, dist_v: int) -> bool:
        return self.deadline is None or t + dist_v <= self.deadline

    def may_rest(self, v: int, t: int) -> bool:
        return v == self.goal and t >= self.t_rest and (self.deadline is None or t <= self.deadline)


@dataclass
class LowLevelResult:
    path: list[int]
    lower_bound: int
    expansions: int


def ecbs_low_level(
    mobility: Mobility,
    start: int,
    goal: int,
    constraints: AgentConstraints = AgentConstraints(),
    bound: float = 1.0,
    cat: ConflictTable | None = None,
    dist: np.ndarray | None = None,
    budget: int | None = None,
) -> LowLevelResult:
    """Focal space-time A* for one agent.

    Returns a path of node ids indexed by time that reaches ``goal`` and can
    rest there forever, together with the search's lower bound on the
    constrained optimum; ``len(path) - 1 <= bound * lower_bound``.
    """
    if bound < 1:
        raise ValueError("bound must be >= 1")
    if dist is None:
        dist = mobility.distances_to(goal)
    if dist[start] < 0:
        raise MapfError("unreachable", f"goal node {goal} unreachable from {start}")
    cat = cat or ConflictTable()
    rules = _Rules.of(constraints, goal)
    t_rest, deadline = rules.t_rest, rules.deadline
    t_max = constraints.max_time() + int(mobility.free.sum()) + 1
    if not rules.allows_start(start):
        raise MapfError("infeasible_constraints", "start is constrained at time 0")
    if not rules.can_finish(int(dist[start])):
        raise MapfError("no_path", "goal rest window is empty")

    def h(v: int, t: int) -> int:
        return max(int(dist[v]), t_rest - t)

    queue = FocalQueue(bound)
    tie = itertools.count()
    f0 = h(start, 0)
    queue.push((start, 0), f0, f0, (0, f0, 0, next(tie)))
    parent: dict[tuple[int, int], tuple[int, int] | None] = {(start, 0): None}
    best_conf: dict[tuple[int, int], int] = {(start, 0): 0}
    closed: set[tuple[int, int]] = set()
    expansions = 0
    while len(queue):
        state, _, lb_min = queue.pop()
        if state in closed:
            continue
        v, t = state  # type: ignore[misc]
        if v == goal and t >= t_rest:
            path = []
            s: tuple[int, int] | None = state  # type: ignore[assignment]
            while s is not None:
                path.append(s[0])
                s = parent[s]
            return LowLevelResult(path[::-1], lb_min, expansions)
        closed.add(state)  # type: ignore[arg-type]
        expansions += 1
        if budget is not None and expansions > budget:
            raise MapfError("timeout", "low-level expansion budget exhausted")
        conf = best_conf[state]  # type: ignore[index]
        t2 = t + 1
        if t2 > t_max:
            continue
        for w in mobility.nbrs[v]:
            if not rules.allows(v, w, t) or not rules.in_time(t2, int(dist[w])):
                continue
            nxt = (w, t2)
            if nxt in closed:
                continue
            c2 = conf + cat.move_cost(v, w, t)
            if best_conf.get(nxt, c2 + 1) <= c2:
                continue
            best_conf[nxt] = c2
            parent[nxt] = state  # type: ignore[assignment]
            hw = h(w, t2)
            if dist[w] < 0:
                continue
            f = t2 + hw
            queue.push(nxt, f, f, (c2, f, -t2, next(tie)))
    raise MapfError("no_path", "no path satisfies the constraints")


def _at(path: Sequence[int], t: int) -> int:
    return path[t] if t < len(path) else path[-1]


def find_conflicts(paths: Sequence[Sequence[int]]) -> tuple[int, tuple | None]:
    """Count conflicting agent pairs and return the earliest conflict.

    Conflicts are ``("vertex", i, j, v, t)`` or ``("edge", i, j, u, v, t)``
    (agent ``i`` moves ``u -> v`` while ``j`` moves ``v -> u`` between ``t`` and ``t+1``).
    Agents remain at their last node after their path ends.
    """
    pairs, first, _ = _scan_conflicts(paths)
    return len(pairs), first


def _scan_conflicts(paths: Sequence[Sequence[int]]) -> tuple[set[tuple[int, int]], tuple | None, int]:
    """Conflicting pairs, the earliest conflict and the number of conflict events."""
    horizon = max(len(p) for p in paths)
    pairs: set[tuple[int, int]] = set()
    first = None
    events = 0
    for t in range(horizon):
        occ: dict[int, int] = {}
        for i, p in enumerate(paths):
            v = _at(p, t)
            if v in occ:
                j = occ[v]
                events += 1
                pairs.add((j, i))
                if first is None:
                    first = ("vertex", j, i, v, t)
            else:
                occ[v] = i
        if t + 1 < horizon:
            moves: dict[tuple[int, int], int] = {}
            for i, p in enumerate(paths):
                u, v = _at(p, t), _at(p, t + 1)
                if u != v:
                    moves[(u, v)] = i
            for (u, v), i in moves.items():
                j = moves.get((v, u))
                if j is not None and i < j:
                    events += 1
                    pairs.add((i, j))
                    if first is None:
                        first = ("edge", i, j, u, v, t)
    return pairs, first, events


def joint_search(
    mobilities: Sequence[Mobility],
    starts: Sequence[int],
    goals: Sequence[int],
    dists: Sequence[np.ndarray],
    constraints: Sequence[AgentConstraints],
    cap: int,
) -> tuple[float | None, list[list[int]], int]:
    """Optimal conflict-free plan of a small agent group under per-agent constraints.

    Joint space-time A*: an agent may park on its goal for good once its
    constraints allow it, and parked agents cost nothing. Time is capped one
    step past the last constraint, after which the rules no longer change.
    Returns ``(cost, paths, expansions)``; cost is ``inf`` when infeasible
    and ``None`` when more than ``cap`` states were expanded.
    """
    k = len(starts)
    rules = [_Rules.of(c, g) for c, g in zip(constraints, goals)]
    if not all(r.allows_start(s) and r.can_finish(int(d[s])) for r, s, d in zip(rules, starts, dists)):
        return math.inf, [], 0
    t_cap = max(c.max_time() for c in constraints) + 1
    heap: list = []
    best: dict = {}
    parent: dict = {}

    def push(g: int, pos: tuple, done: tuple, t: int, prev: tuple | None) -> None:
        tau = min(t, t_cap)
        options = [(d,) if d or not r.may_rest(v, t) else (False, True) for r, v, d in zip(rules, pos, done)]
        for flags in itertools.product(*options):
            key = (pos, flags, tau)
            if g < best.get(key, math.inf):
                best[key] = g
                parent[key] = prev
                h = sum(0 if f else max(int(d[v]), r.t_rest - tau) for r, d, v, f in zip(rules, dists, pos, flags))
                heapq.heappush(heap, (g + h, -g, t, key))

    push(0, tuple(starts), (False,) * k, 0, None)
    expansions = 0
    while heap:
        _, neg_g, t, key = heapq.heappop(heap)
        g = -neg_g
        if best[key] < g:
            continue
        pos, done, tau = key
        if all(done):
            chain = []
            node = key
            while node is not None:
                chain.append(node)
                node = parent[node]
            chain.reverse()
            paths = []
            for i in range(k):
                end = next(n for n, c in enumerate(chain) if c[1][i])
                paths.append([c[0][i] for c in chain[: end + 1]])
            return g, paths, expansions
        expansions += 1
        if expansions > cap:
            return None, [], expansions
        t2 = t + 1
        choices = [
            (v,) if d else [w for w in m.nbrs[v] if r.allows(v, w, tau) and r.in_time(t2, int(dist[w]))]
            for m, r, dist, v, d in zip(mobilities, rules, dists, pos, done)
        ]
        step = k - sum(done)
        for nxt in itertools.product(*choices):
            if len(set(nxt)) < k:
                continue
            if any(nxt[i] == pos[j] and nxt[j] == pos[i] and pos[i] != pos[j] for i in range(k) for j in range(i + 1, k)):
                continue
            push(g + step, nxt, done, t2, key)
    return math.inf, [], expansions


class _PairBound:
    """Admissible node bound from exact joint optima of disjoint conflicting pairs.

    Only single-agent groups take part, since their per-agent bounds are
    individual. Pair optima are memoized on the pair's constraints; a pair
    whose search hits the cap contributes nothing.
    """

    def __init__(self, mobilities, starts, goals, dists, cap: int):
        self.mobilities, self.starts, self.goals, self.dists = mobilities, starts, goals, dists
        self.cap = cap
        self.memo: dict = {}
        self.expansions = 0

    def pair(self, i: int, j: int, cons: Sequence[AgentConstraints]) -> float | None:
        key = (i, j, cons[i], cons[j])
        if key not in self.memo:
            ix = [i, j]
            opt, _, n = joint_search([self.mobilities[a] for a in ix], [self.starts[a] for a in ix],
                                     [self.goals[a] for a in ix], [self.dists[a] for a in ix],
                                     [cons[i], cons[j]], self.cap)
            self.expansions += n
            self.memo[key] = opt
        return self.memo[key]

    def __call__(self, cons, lbs, pairs, singles) -> float:
        gains = []
        for i, j in sorted(pairs):
            if i not in singles or j not in singles:
                continue
            opt = self.pair(i, j, cons)
            if opt is not None and opt > lbs[i] + lbs[j]:
                gains.append((opt - lbs[i] - lbs[j], i, j))
        used: set[int] = set()
        total = float(sum(lbs))
        for gain, i, j in sorted(gains, key=lambda x: (-x[0], x[1], x[2])):
            if i not in used and j not in used:
                used |= {i, j}
                total += gain
        return total


@dataclass
class _HLNode:
    constraints: tuple[AgentConstraints, ...]
    paths: list[list[int]]
    lbs: list[int]
    n_conflicts: int
    conflict: tuple | None
    floor: int = 0  # inherited lower bound on the subtree optimum
    groups: tuple[tuple[int, ...], ...] = ()  # agents planned jointly

    @property
    def cost(self) -> int:
        return sum(len(p) - 1 for p in self.paths)

    @property
    def lb(self) -> int:
        return max(sum(self.lbs), self.floor)

    @property
    def focal_value(self) -> int:
        # No plan below this node can cost less than its lower bound.
        return max(self.cost, self.lb)

    def group_of(self, k: int) -> tuple[int, ...]:
        return next(g for g in self.groups if k in g)


def _branches(node: _HLNode) -> list[tuple[int, dict[int, AgentConstraints]]]:
    """Child constraint sets for the node's first conflict as ``(agent to replan, updates)``.

    A vertex conflict on a cell where one agent already rests at its goal is
    split by that agent's rest time: either it starts resting after ``t``, or
    it rests by ``t`` and the other agent may never enter the cell from ``t`` on.
    Every conflict-free plan falls into exactly one branch.
    """
    cons = node.constraints
    if node.conflict[0] == "edge":
        _, i, j, u, v, t = node.conflict
        return [(i, {i: cons[i].add_edge(u, v, t)}), (j, {j: cons[j].add_edge(v, u, t)})]
    _, i, j, v, t = node.conflict
    for a, b in ((i, j), (j, i)):
        path = node.paths[a]
        if path[-1] == v and len(path) - 1 <= t:
            return [
                (a, {a: cons[a].rest_later_than(t)}),
                (b, {a: cons[a].rest_no_later_than(t), b: cons[b].add_barrier(v, t)}),
            ]
    return [(i, {i: cons[i].add_vertex(v, t)}), (j, {j: cons[j].add_vertex(v, t)})]


@dataclass
class EcbsResult:
    paths: list[list[int]]
    cost: int
    lower_bound: int
    hl_expansions: int
    ll_expansions: int


def ecbs(
    mobilities: Sequence[Mobility],
    starts: Sequence[int],
    goals: Sequence[int],
    bound: float = 1.3,
    budget: int = 200_000,
) -> EcbsResult:
    """Bounded-suboptimal multi-agent search; ``cost <= bound * lower_bound``.

    Agents that keep conflicting are merged into a group planned by exact
    joint search, as long as the group's joint state space stays small.
    """
    n = len(starts)
    dists = []
    for k in range(n):
        d = mobilities[k].distances_to(goals[k])
        if d[starts[k]] < 0:
            raise MapfError("unreachable", f"agent index {k}: goal unreachable")
        dists.append(d)
    sizes = [int(m.free.sum()) for m in mobilities]
    ll_total = 0

    def replan(group: tuple[int, ...], cons, paths) -> tuple[list[list[int]], list[int]] | None:
        """New paths and lower bounds for ``group``; None when infeasible."""
        nonlocal ll_total
        left = max(budget - ll_total, 1)
        if len(group) == 1:
            (k,) = group
            cat = ConflictTable.from_paths(p for j, p in enumerate(paths) if j != k)
            try:
                res = ecbs_low_level(mobilities[k], starts[k], goals[k], cons[k], bound, cat, dists[k], budget=left)
            except MapfError as exc:
                if exc.reason == "timeout":
                    raise
                return None
            ll_total += res.expansions
            return [res.path], [res.lower_bound]
        cost, gpaths, used = joint_search([mobilities[a] for a in group], [starts[a] for a in group],
                                          [goals[a] for a in group], [dists[a] for a in group],
                                          [cons[a] for a in group], left)
        ll_total += used
        if cost is None:
            raise MapfError("timeout", "joint search expansion budget exhausted")
        if cost == math.inf:
            return None
        return gpaths, [len(p) - 1 for p in gpaths]

    pair_bound = _PairBound(mobilities, starts, goals, dists, _PAIR_CAP)

    def make_node(cons, paths, lbs, floor, groups) -> _HLNode | None:
        nonlocal ll_total
        pairs, first, events = _scan_conflicts(paths)
        before = pair_bound.expansions
        singles = {g[0] for g in groups if len(g) == 1}
        lb = pair_bound(cons, lbs, pairs, singles)
        ll_total += pair_bound.expansions - before
        if lb == math.inf:
            return None
        return _HLNode(tuple(cons), paths, lbs, events, first, max(int(lb), floor), groups)

    def child(node: _HLNode, cons, group, groups) -> _HLNode | None:
        res = replan(group, cons, node.paths)
        if res is None:
            return None
        new_paths, new_lbs = list(node.paths), list(node.lbs)
        for a, p, lb in zip(group, *res):
            new_paths[a], new_lbs[a] = p, lb
        return make_node(cons, new_paths, new_lbs, node.lb, groups)

    empty = AgentConstraints()
    paths: list[list[int]] = [[s] for s in starts]
    lbs = [0] * n
    for k in range(n):
        res = replan((k,), [empty] * n, paths[:k])
        assert res is not None
        paths[k], lbs[k] = res[0][0], res[1][0]
    root = make_node([empty] * n, paths, lbs, 0, tuple((k,) for k in range(n)))
    if root is None:
        raise MapfError("no_solution", "some pair of agents cannot reach their goals together")

    queue = FocalQueue(bound)
    tie = itertools.count()
    queue.push(root, root.lb, root.focal_value, (root.n_conflicts, root.cost, next(tie)))
    seen: dict[tuple[int, int], int] = {}  # conflicts branched on per agent pair
    hl = 0
    while len(queue):
        node, _, lb_min = queue.pop()
        assert isinstance(node, _HLNode)
        if node.conflict is None:
            return EcbsResult(node.paths, node.cost, lb_min, hl, ll_total)
        hl += 1
        if hl + ll_total > budget:
            raise MapfError("timeout", "ECBS expansion budget exhausted")
        i, j = node.conflict[1], node.conflict[2]
        gi, gj = node.group_of(i), node.group_of(j)
        seen[(i, j)] = seen.get((i, j), 0) + 1
        merged = tuple(sorted(gi + gj))
        count = sum(seen.get((min(a, b), max(a, b)), 0) for a in gi for b in gj)
        if count > _MERGE_AFTER and math.prod(sizes[a] for a in merged) <= _MERGE_STATES:
            groups = tuple(sorted([g for g in node.groups if g not in (gi, gj)] + [merged]))
            children = [child(node, node.constraints, merged, groups)]
        else:
            children = []
            for k, updates in _branches(node):
                new_cons = list(node.constraints)
                for a, c in updates.items():
                    new_cons[a] = c
                children.append(child(node, new_cons, node.group_of(k), node.groups))
        for c in children:
            if c is not None:
                queue.push(c, c.lb, c.focal_value, (c.n_conflicts, c.cost, next(tie)))
    raise MapfError("no_solution", "constraint tree exhausted")


@dataclass
class DiscretePlan:
    """Goal-padded waypoints for every agent, all of length ``l_max``.

    ``nodes`` holds the grid node each waypoint occupies for conflict
    purposes; off-grid start and goal points map to their snapped node.
    """

    agents: list[AgentSpec]
    waypoints: np.ndarray
    nodes: np.ndarray
    cost: int
    lower_bound: int
    grid_steps: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def l_max(self) -> int:
        return int(self.waypoints.shape[1])

    def index_of(self, agent_id: int) -> int:
        for k, a in enumerate(self.agents):
            if a.id == agent_id:
                return k
        raise KeyError(agent_id)

    def path(self, agent_id: int) -> np.ndarray:
        return self.waypoints[self.index_of(agent_id)]

    def to_dict(self) -> dict:
        return {
            "l_max": self.l_max,
            "cost": self.cost,
            "lower_bound": self.lower_bound,
            "agents": [
                {"id": a.id, "waypoints": self.waypoints[k].tolist()} for k, a in enumerate(self.agents)
            ],
            "stats": self.stats,
        }


def plan_discrete(
    vmap: VoxelMap,
    agents: Sequence[AgentSpec],
    config: PlannerConfig,
    graph: GridGraph | None = None,
) -> DiscretePlan:
    """Conflict-free, goal-padded grid plans for all agents."""
    graph = graph or GridGraph.for_map(vmap, config.grid_xy, config.grid_z)
    mobs, starts, goals = [], [], []
    for a in agents:
        mob = graph.mobility(a.radius)
        pair = []
        for label, p in (("start", a.start), ("goal", a.goal)):
            node = graph.nearest(p)
            if node is None or not mob.free[node]:
                raise MapfError(f"{label}_off_grid", f"agent {a.id}: no usable grid node near {label}")
            if not graph.on_grid(p) and not box_in_free_space(vmap, Box.hull(p, graph.coord(node)), a.radius):
                raise MapfError(f"{label}_off_grid", f"agent {a.id}: {label} cannot reach its grid node")
            pair.append(node)
        mobs.append(mob)
        starts.append(pair[0])
        goals.append(pair[1])
    if len(set(starts)) != len(starts) or len(set(goals)) != len(goals):
        raise MapfError("endpoint_conflict", "two agents share a start or goal grid node")

    res = ecbs(mobs, starts, goals, config.ecbs_bound, config.mapf_budget)

    prepend = any(not graph.on_grid(a.start) for a in agents)
    seqs, node_seqs = [], []
    for a, path in zip(agents, res.paths):
        pts = [graph.coord(v) for v in path]
        nodes = list(path)
        if prepend:
            pts.insert(0, np.asarray(a.start, dtype=float))
            nodes.insert(0, path[0])
        if not graph.on_grid(a.goal):
            pts.append(np.asarray(a.goal, dtype=float))
            nodes.append(path[-1])
        else:
            pts[-1] = np.asarray(a.goal, dtype=float)
        if not prepend:
            pts[0] = np.asarray(a.start, dtype=float)
        seqs.append(pts)
        node_seqs.append(nodes)
    l_max = max(len(s) for s in seqs)
    way = np.empty((len(agents), l_max, 3))
    nodes_arr = np.empty((len(agents), l_max), dtype=np.int64)
    for k, (pts, nodes) in enumerate(zip(seqs, node_seqs)):
        way[k, : len(pts)] = pts
        way[k, len(pts):] = pts[-1]
        nodes_arr[k, : len(nodes)] = nodes
        nodes_arr[k, len(nodes):] = nodes[-1]
    return DiscretePlan(
        list(agents), way, nodes_arr, res.cost, res.lower_bound, graph.steps.copy(),
        {"hl_expansions": res.hl_expansions, "ll_expansions": res.ll_expansions},
    )


def plan_violations(plan: DiscretePlan) -> list[str]:
    """Independent check of the padded plan: equal lengths, unit moves, no
    vertex or swap conflicts on the recorded grid nodes."""
    out = []
    nodes = plan.nodes
    n, L = nodes.shape
    if plan.waypoints.shape[:2] != (n, L):
        out.append("waypoint and node arrays disagree in shape")
    for t in range(L):
        col = nodes[:, t]
        if len(np.unique(col)) != n:
            out.append(f"vertex conflict at k={t}")
    for t in range(L - 1):
        a, b = nodes[:, t], nodes[:, t + 1]
        for i in range(n):
            for j in range(i + 1, n):
                if a[i] == b[j] and a[j] == b[i] and a[i] != b[i]:
                    out.append(f"edge conflict between {i} and {j} at k={t}")
    idx = np.rint(plan.waypoints / plan.grid_steps).astype(np.int64)
    on_grid = np.all(np.abs(plan.waypoints / plan.grid_steps - idx) < 1e-9, axis=2)
    for i in range(n):
        for t in range(L - 1):
            if on_grid[i, t] and on_grid[i, t + 1]:
                step = np.abs(idx[i, t + 1] - idx[i, t]).sum()
                if step > 1:
                    out.append(f"agent {i} jumps at k={t}")
    return out
