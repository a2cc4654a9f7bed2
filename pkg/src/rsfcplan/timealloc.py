"""Shared knot vector from corridor transition times.

Times are held internally as integer half-steps ("ticks") so that the merged
knot set can be deduplicated by exact equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import TimeAllocationError
from .rsfc import RsfcSequence
from .sfc import CorridorSequence

Membership = Callable[[int, int, np.ndarray], bool]


def partial_time_ticks(
    traj: np.ndarray,
    n_sets: int,
    member: Membership,
    is_rsfc: bool = False,
    delay: bool = True,
) -> list[int]:
    """Transition ticks for one sequence of convex sets.

    ``member(m, n, p)`` says whether waypoint ``n`` (position ``p``) lies in
    set ``m``. When two consecutive sets share waypoints the transition sits
    at the middle one; otherwise (only possible for relative corridors) it
    sits half a step before the first waypoint of the next set, or exactly on
    it when ``delay`` is off.
    """
    L = len(traj)
    out: list[int] = []
    m = 0
    n = 0
    while n < L:
        if m >= n_sets - 1:
            break
        if member(m, n, traj[n]) and member(m + 1, n, traj[n]):
            count = 1
            while n + count < L and member(m, n + count, traj[n + count]) and member(m + 1, n + count, traj[n + count]):
                count += 1
            out.append(2 * (n + count // 2))
            n += count // 2
            m += 1
        elif member(m + 1, n, traj[n]):
            if not is_rsfc:
                raise TimeAllocationError("disconnected_sfc", f"no shared waypoint between corridors {m} and {m + 1}")
            out.append(2 * n - 1 if delay else 2 * n)
            m += 1
        n += 1
    if m < n_sets - 1:
        raise TimeAllocationError("sets_exhausted", f"waypoints ended with {n_sets - 1 - m} transitions unplaced")
    return out


def partial_time_segment(
    traj: np.ndarray,
    sets: Sequence,
    t_step: float,
    is_rsfc: bool = False,
    delay: bool = True,
) -> np.ndarray:
    """Transition times (seconds) for corridors or half-space entries exposing ``member(k, p)``."""
    ticks = partial_time_ticks(traj, len(sets), lambda m, n, p: sets[m].member(n, p), is_rsfc, delay)
    return np.asarray(ticks, dtype=float) * (t_step / 2)


@dataclass
class TimeSegments:
    ticks: np.ndarray
    t_step: float
    sfc_index: dict[int, np.ndarray] = field(default_factory=dict)
    rsfc_index: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    sfc_ticks: dict[int, list[int]] = field(default_factory=dict)
    rsfc_ticks: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    @property
    def knots(self) -> np.ndarray:
        return self.ticks * (self.t_step / 2)

    @property
    def M(self) -> int:
        return len(self.ticks) - 1

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.tolist(),
            "sfc_assignment": {str(k): v.tolist() for k, v in self.sfc_index.items()},
            "rsfc_assignment": {f"{i},{j}": v.tolist() for (i, j), v in self.rsfc_index.items()},
        }


def assign_segments(ticks: np.ndarray, partial: Sequence[int]) -> np.ndarray:
    """Set index active on each segment: the number of transitions at or before its start."""
    return np.searchsorted(np.asarray(partial, dtype=np.int64), ticks[:-1], side="right")


def merge_time_segments(
    sfc_partials: dict[int, Sequence[int]],
    rsfc_partials: dict[tuple[int, int], Sequence[int]],
    l_max: int,
    t_step: float,
) -> TimeSegments:
    end = 2 * (l_max - 1)
    pool = {0, end}
    for part in list(sfc_partials.values()) + list(rsfc_partials.values()):
        for t in part:
            if not 0 <= t <= end:
                raise TimeAllocationError("time_out_of_range", f"transition tick {t} outside [0, {end}]")
            pool.add(int(t))
    if end <= 0:
        raise TimeAllocationError("zero_horizon", f"l_max={l_max} leaves no time to allocate")
    ticks = np.array(sorted(pool), dtype=np.int64)
    seg = TimeSegments(ticks, t_step)
    for key, part in sfc_partials.items():
        seg.sfc_index[key] = assign_segments(ticks, part)
        seg.sfc_ticks[key] = list(part)
    for key, part in rsfc_partials.items():
        seg.rsfc_index[key] = assign_segments(ticks, part)
        seg.rsfc_ticks[key] = list(part)
    return seg


def merge_times(partials: Sequence[Sequence[float]], l_max: int, t_step: float) -> np.ndarray:
    """Knot vector in seconds from partial transition times given in seconds.

    Every time must be a multiple of ``t_step / 2``; it is snapped to ticks so
    deduplication stays exact.
    """
    ticks = []
    for part in partials:
        raw = np.asarray(part, dtype=float) * (2.0 / t_step)
        snapped = np.rint(raw)
        if np.any(np.abs(raw - snapped) > 1e-9):
            raise TimeAllocationError("off_tick", "transition times must be multiples of t_step/2")
        ticks.append(snapped.astype(np.int64).tolist())
    return merge_time_segments(dict(enumerate(ticks)), {}, l_max, t_step).knots


def allocate(
    waypoints: np.ndarray,
    agent_ids: Sequence[int],
    sfcs: Sequence[CorridorSequence],
    rsfcs: dict[tuple[int, int], RsfcSequence],
    t_step: float,
    delay: bool = True,
) -> TimeSegments:
    """Partial segments for every corridor sequence, merged into one knot vector."""
    pos = {a: k for k, a in enumerate(agent_ids)}
    sfc_parts = {}
    for seq in sfcs:
        traj = waypoints[pos[seq.agent]]
        sfc_parts[seq.agent] = partial_time_ticks(traj, len(seq), lambda m, n, p, s=seq: s[m].member(n, p))
    rsfc_parts = {}
    for (i, j), seq in rsfcs.items():
        rel = waypoints[pos[j]] - waypoints[pos[i]]
        rsfc_parts[(i, j)] = partial_time_ticks(
            rel, len(seq), lambda m, n, p, s=seq: s[m].member(n, p), is_rsfc=True, delay=delay
        )
    return merge_time_segments(sfc_parts, rsfc_parts, waypoints.shape[1], t_step)
