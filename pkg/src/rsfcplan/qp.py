"""Single QP over all agents' Bernstein control points."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .bernstein import difference_matrix, jerk_cost_block
from .errors import QPAssemblyError
from .rsfc import RsfcSequence
from .scenario import AgentSpec, PlannerConfig
from .sfc import CorridorSequence
from .solver import INF, QPResult, SolverSettings, residuals, solve_qp
from .timealloc import TimeSegments


@dataclass
class QPProblem:
    """``minimize c'Qc`` subject to ``A_eq c = b_eq`` and ``l_in <= A_in c <= u_in``."""

    n_agents: int
    n_segments: int
    degree: int
    Q: sp.csc_matrix
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    l_in: np.ndarray
    u_in: np.ndarray
    row_kind: list[str] = field(default_factory=list)
    eq_rows_raw: int = 0

    @property
    def n_vars(self) -> int:
        return self.Q.shape[0]

    def index(self, agent: int, segment: int, axis: int, k: int) -> int:
        return var_index(agent, segment, axis, k, self.n_segments, self.degree)

    def stacked(self):
        A = sp.vstack([self.A_eq, self.A_in]).tocsc()
        l = np.concatenate([self.b_eq, self.l_in])
        u = np.concatenate([self.b_eq, self.u_in])
        return 2.0 * self.Q, np.zeros(self.n_vars), A, l, u

    def controls(self, x: np.ndarray) -> np.ndarray:
        """Reshape a solution vector to ``(agents, segments, N+1, 3)``."""
        c = x.reshape(self.n_agents, self.n_segments, 3, self.degree + 1)
        return np.transpose(c, (0, 1, 3, 2)).copy()

    def cost(self, x: np.ndarray) -> float:
        return float(x @ (self.Q @ x))


def var_index(agent: int, segment: int, axis: int, k: int, M: int, N: int) -> int:
    return ((agent * M + segment) * 3 + axis) * (N + 1) + k


def expected_equality_rows(n_agents: int, M: int, continuity: int = 2) -> int:
    """Boundary plus continuity rows before redundancy removal."""
    per_axis = 2 * (continuity + 1) + (continuity + 1) * (M - 1)
    return n_agents * 3 * per_axis


def _axis_equality_block(durations: np.ndarray, N: int, continuity: int) -> np.ndarray:
    """Rows of one agent/axis equality block (boundary first, then continuity)."""
    M = len(durations)
    nv = M * (N + 1)
    rows = []
    for r in range(continuity + 1):
        row = np.zeros(nv)
        row[0 : N + 1] = _endpoint_row(N, r, durations[0], start=True)
        rows.append(row)
    for r in range(continuity + 1):
        row = np.zeros(nv)
        row[(M - 1) * (N + 1) : M * (N + 1)] = _endpoint_row(N, r, durations[-1], start=False)
        rows.append(row)
    for m in range(M - 1):
        for r in range(continuity + 1):
            row = np.zeros(nv)
            row[m * (N + 1) : (m + 1) * (N + 1)] = _endpoint_row(N, r, durations[m], start=False)
            row[(m + 1) * (N + 1) : (m + 2) * (N + 1)] = -_endpoint_row(N, r, durations[m + 1], start=True)
            rows.append(row)
    return np.array(rows)


def _endpoint_row(N: int, r: int, duration: float, start: bool) -> np.ndarray:
    """Linear functional giving the r-th time derivative at a piece endpoint."""
    if r == 0:
        e = np.zeros(N + 1)
        e[0 if start else N] = 1.0
        return e
    d = difference_matrix(N, r, duration)
    return d[0] if start else d[-1]


def independent_rows(block: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal linearly independent subset of rows (pivoted QR)."""
    if block.size == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = sla.qr(block.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], 1.0)))
    return np.sort(piv[:rank])


def assemble(
    agents: Sequence[AgentSpec],
    corridors: Sequence[CorridorSequence],
    rsfcs: dict[tuple[int, int], RsfcSequence],
    segments: TimeSegments,
    config: PlannerConfig,
) -> QPProblem:
    nq = len(agents)
    M = segments.M
    N = config.degree
    knots = segments.knots
    dur = np.diff(knots)
    if np.any(dur <= 0):
        raise QPAssemblyError("bad_knots", "knot vector is not strictly increasing")
    if len(corridors) != nq:
        raise QPAssemblyError("dimension_mismatch", "one corridor sequence per agent required")
    nv = 3 * nq * M * (N + 1)
    pos = {a.id: k for k, a in enumerate(agents)}
    seg_len = N + 1

    # Cost: identical block per (agent, axis) up to the segment durations.
    blocks = [jerk_cost_block(d, N, config.deriv_order) for d in dur]
    per_agent_axis = [blocks[m] for m in range(M) for _ in range(3)]
    # Order: agent -> segment -> axis, matching var_index.
    Q = sp.block_diag(per_agent_axis * nq, format="csc")

    # Equalities.
    eq_block = _axis_equality_block(dur, N, config.continuity)
    keep = independent_rows(eq_block)
    raw_rows = eq_block.shape[0]
    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    row = 0
    nb = config.continuity + 1
    for i, a in enumerate(agents):
        for axis in range(3):
            rhs = np.zeros(raw_rows)
            rhs[0] = a.start[axis]
            rhs[nb] = a.goal[axis]
            # Consistency of dropped rows.
            if len(keep) < raw_rows:
                coef, *_ = np.linalg.lstsq(eq_block[keep].T, eq_block.T, rcond=None)
                if np.max(np.abs(coef.T @ rhs[keep] - rhs)) > 1e-9:
                    raise QPAssemblyError("inconsistent_equalities", "boundary and continuity rows conflict")
            cols = np.array([var_index(i, m, axis, k, M, N) for m in range(M) for k in range(seg_len)])
            sub = eq_block[keep]
            r_idx, c_idx = np.nonzero(sub)
            eq_rows.append(r_idx + row)
            eq_cols.append(cols[c_idx])
            eq_vals.append(sub[r_idx, c_idx])
            b_eq.append(rhs[keep])
            row += len(keep)
    A_eq = sp.csr_matrix(
        (np.concatenate(eq_vals), (np.concatenate(eq_rows), np.concatenate(eq_cols))), shape=(row, nv)
    )
    b_eq = np.concatenate(b_eq)

    # Corridor bounds, one row per variable.
    tight = config.corridor_tightening
    lo = np.full(nv, -INF)
    hi = np.full(nv, INF)
    for seq in corridors:
        i = pos[seq.agent]
        a = agents[i]
        assign = segments.sfc_index.get(seq.agent)
        if assign is None or len(assign) != M:
            raise QPAssemblyError("missing_assignment", f"agent {seq.agent} has no corridor per segment")
        for m in range(M):
            box = seq[int(assign[m])].box
            for axis in range(3):
                l_, u_ = box.lo[axis] + tight, box.hi[axis] - tight
                if l_ > u_:
                    l_ = u_ = 0.5 * (box.lo[axis] + box.hi[axis])
                for pin, active in ((a.start[axis], m == 0), (a.goal[axis], m == M - 1)):
                    if active:
                        l_, u_ = min(l_, pin), max(u_, pin)
                base = var_index(i, m, axis, 0, M, N)
                lo[base : base + seg_len] = l_
                hi[base : base + seg_len] = u_
    kinds = ["sfc"] * nv
    in_rows = [np.arange(nv)]
    in_cols = [np.arange(nv)]
    in_vals = [np.ones(nv)]
    l_in = [lo]
    u_in = [hi]
    nrow = nv
    for (ii, jj), seq in rsfcs.items():
        i, j = pos[ii], pos[jj]
        assign = segments.rsfc_index.get((ii, jj))
        if assign is None or len(assign) != M:
            raise QPAssemblyError("missing_assignment", f"pair {(ii, jj)} has no half-space per segment")
        for m in range(M):
            hs = seq[int(assign[m])].halfspace
            ax, sg = hs.axis, hs.sign
            ks = np.arange(seg_len)
            ci = var_index(i, m, ax, 0, M, N) + ks
            cj = var_index(j, m, ax, 0, M, N) + ks
            r = nrow + ks
            in_rows += [r, r]
            in_cols += [cj, ci]
            in_vals += [np.full(seg_len, sg), np.full(seg_len, -sg)]
            l_in.append(np.full(seg_len, hs.margin + tight))
            u_in.append(np.full(seg_len, INF))
            nrow += seg_len
        kinds += ["rsfc"] * (M * seg_len)
    A_in = sp.csr_matrix(
        (np.concatenate(in_vals), (np.concatenate(in_rows), np.concatenate(in_cols))), shape=(nrow, nv)
    )
    return QPProblem(nq, M, N, Q, A_eq, b_eq, A_in, np.concatenate(l_in), np.concatenate(u_in), kinds,
                     raw_rows * 3 * nq)


def solve(problem: QPProblem, settings: SolverSettings | None = None) -> QPResult:
    P, q, A, l, u = problem.stacked()
    return solve_qp(P, q, A, l, u, settings)


def kkt_report(problem: QPProblem, result: QPResult) -> dict:
    P, q, A, l, u = problem.stacked()
    return residuals(P, q, A, l, u, result.x, result.y)
