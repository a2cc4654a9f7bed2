"""Bernstein basis algebra for piecewise polynomial trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np


def basis(k: int, n: int, t):
    """Bernstein basis polynomial ``B_{k,n}(t)``; ``t`` may be an array."""
    if not 0 <= k <= n:
        raise ValueError(f"basis index {k} out of range for degree {n}")
    t = np.asarray(t, dtype=float)
    return comb(n, k) * t**k * (1.0 - t) ** (n - k)


def basis_matrix(n: int, t) -> np.ndarray:
    """Rows are samples, columns are ``B_{0..n,n}``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.stack([basis(k, n, t) for k in range(n + 1)], axis=-1)


@lru_cache(maxsize=None)
def _difference_matrix(n: int, order: int) -> np.ndarray:
    # Maps degree-n controls to the controls of the order-th derivative
    # w.r.t. the local parameter (before dividing by the interval length).
    d = np.eye(n + 1)
    for r in range(order):
        m = n - r
        step = np.zeros((m, m + 1))
        idx = np.arange(m)
        step[idx, idx] = -m
        step[idx, idx + 1] = m
        d = step @ d
    d.setflags(write=False)
    return d


def difference_matrix(n: int, order: int, duration: float = 1.0) -> np.ndarray:
    """Linear map from controls to order-``order`` derivative controls."""
    if order > n:
        raise ValueError("derivative order exceeds degree")
    return _difference_matrix(n, order) / duration**order


@lru_cache(maxsize=None)
def _gram(n: int) -> np.ndarray:
    g = np.empty((n + 1, n + 1))
    for k in range(n + 1):
        for l in range(n + 1):
            g[k, l] = comb(n, k) * comb(n, l) / ((2 * n + 1) * comb(2 * n, k + l))
    g.setflags(write=False)
    return g


def gram_matrix(n: int) -> np.ndarray:
    """``G[k, l] = integral_0^1 B_{k,n} B_{l,n}``."""
    return _gram(n)


def jerk_cost_block(duration: float, n: int, order: int = 3) -> np.ndarray:
    """Matrix ``Q`` with ``c @ Q @ c = integral of (d^order p / dt^order)^2`` over the piece."""
    if duration <= 0:
        raise ValueError("interval length must be positive")
    if order > n:
        raise ValueError("derivative order exceeds degree")
    d = _difference_matrix(n, order)
    q = d.T @ _gram(n - order) @ d
    return 0.5 * (q + q.T) / duration ** (2 * order - 1)


def evaluate(controls: np.ndarray, tau) -> np.ndarray:
    """Evaluate Bernstein controls of shape ``(n+1, ...)`` at local parameters ``tau``."""
    controls = np.asarray(controls, dtype=float)
    b = basis_matrix(controls.shape[0] - 1, tau)
    return np.tensordot(b, controls, axes=(1, 0))


def de_casteljau(controls: np.ndarray, tau: float) -> np.ndarray:
    pts = np.array(controls, dtype=float)
    for r in range(1, len(pts)):
        pts[: len(pts) - r] = (1 - tau) * pts[: len(pts) - r] + tau * pts[1 : len(pts) - r + 1]
    return pts[0]


@dataclass(frozen=True)
class BernsteinPiece:
    controls: np.ndarray
    t0: float = 0.0
    t1: float = 1.0

    @property
    def degree(self) -> int:
        return self.controls.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    def __call__(self, t) -> np.ndarray:
        return evaluate(self.controls, (np.asarray(t, dtype=float) - self.t0) / self.duration)

    def derivative(self, order: int = 1) -> "BernsteinPiece":
        return BernsteinPiece(derivative_controls(self, order), self.t0, self.t1)


def derivative_controls(piece: BernsteinPiece, order: int = 1) -> np.ndarray:
    """Hodograph controls of the ``order``-th time derivative (degree ``N - order``)."""
    d = difference_matrix(piece.degree, order, piece.duration)
    return np.tensordot(d, piece.controls, axes=(1, 0))


def relative_piece(piece_i: BernsteinPiece, piece_j: BernsteinPiece) -> BernsteinPiece:
    """Piece for ``p_j(t) - p_i(t)``."""
    if piece_i.degree != piece_j.degree:
        raise ValueError("degree mismatch")
    if piece_i.t0 != piece_j.t0 or piece_i.t1 != piece_j.t1:
        raise ValueError("pieces are defined on different intervals")
    return BernsteinPiece(piece_j.controls - piece_i.controls, piece_i.t0, piece_i.t1)


def elevate(controls: np.ndarray, times: int = 1) -> np.ndarray:
    """Degree elevation (same curve, degree raised by ``times``)."""
    c = np.asarray(controls, dtype=float)
    for _ in range(times):
        n = c.shape[0] - 1
        out = np.empty((n + 2,) + c.shape[1:])
        out[0], out[-1] = c[0], c[-1]
        for k in range(1, n + 1):
            a = k / (n + 1)
            out[k] = a * c[k - 1] + (1 - a) * c[k]
        c = out
    return c


@dataclass
class PiecewiseBernstein:
    """Per-agent trajectory: ``controls`` has shape ``(M, N+1, dim)`` over shared ``knots``."""

    knots: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.shape[0] != len(self.knots) - 1:
            raise ValueError("need one control block per segment")

    @property
    def degree(self) -> int:
        return self.controls.shape[1] - 1

    @property
    def n_segments(self) -> int:
        return self.controls.shape[0]

    @property
    def duration(self) -> float:
        return float(self.knots[-1] - self.knots[0])

    def piece(self, m: int) -> BernsteinPiece:
        return BernsteinPiece(self.controls[m], float(self.knots[m]), float(self.knots[m + 1]))

    def segment_of(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, self.n_segments - 1)

    def evaluate(self, t, order: int = 0) -> np.ndarray:
        """Position (or ``order``-th derivative) at times ``t``; returns ``(len(t), dim)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        seg = self.segment_of(t)
        out = np.empty((len(t), self.controls.shape[2]))
        for m in np.unique(seg):
            sel = seg == m
            piece = self.piece(int(m))
            if order:
                piece = piece.derivative(order)
            out[sel] = piece(t[sel])
        return out

    def scaled(self, s: float) -> "PiecewiseBernstein":
        return PiecewiseBernstein(self.knots * s, self.controls.copy())


def knot_jumps(traj: PiecewiseBernstein, max_order: int = 2) -> np.ndarray:
    """Largest absolute jump of derivatives ``0..max_order`` at interior knots, per order."""
    jumps = np.zeros(max_order + 1)
    for m in range(traj.n_segments - 1):
        left, right = traj.piece(m), traj.piece(m + 1)
        for r in range(max_order + 1):
            a = derivative_controls(left, r)[-1] if r else left.controls[-1]
            b = derivative_controls(right, r)[0] if r else right.controls[0]
            jumps[r] = max(jumps[r], float(np.max(np.abs(a - b))))
    return jumps


def bernstein_from_monomial(coeffs: Sequence[float], n: int) -> np.ndarray:
    """Controls of ``sum_i coeffs[i] * tau**i`` in the degree-``n`` basis."""
    coeffs = list(coeffs) + [0.0] * (n + 1 - len(coeffs))
    out = np.zeros(n + 1)
    for k in range(n + 1):
        out[k] = sum(comb(k, i) / comb(n, i) * coeffs[i] for i in range(k + 1))
    return out
