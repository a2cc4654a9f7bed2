"""Sparse convex QP solvers.

Problem form::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

Rows with ``l == u`` are equalities. Two methods share the scaling, the
infeasibility certificate test and the final polish:

* ``admm``: OSQP-style operator splitting (reduced SPD system
  ``P + sigma I + A' diag(rho) A``, over-relaxation, adaptive ``rho``).
* ``ipm``: Mehrotra predictor-corrector interior point on the same data.

Polish guesses the active set from the duals and solves the KKT system on
that set directly, with iterative refinement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

INF = 1e20
RHO_EQ_FACTOR = 1e3
RHO_MIN, RHO_MAX = 1e-6, 1e6


@dataclass(frozen=True)
class SolverSettings:
    method: str = "ipm"
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_loose: float = 1e-4
    eps_pinf: float = 1e-6
    max_iter: int = 20_000
    ipm_max_iter: int = 200
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iter: int = 15
    adapt_every: int = 25
    adapt_tolerance: float = 5.0
    check_every: int = 10
    polish: bool = True
    polish_delta: float = 1e-9
    refine_iter: int = 8


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int = 0
    prim_res: float = np.inf
    dual_res: float = np.inf
    objective: float = np.nan
    polished: bool = False
    wall_time: float = 0.0
    certificate: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _col_max(M: sp.spmatrix, n: int) -> np.ndarray:
    if M.shape[0] == 0 or M.nnz == 0:
        return np.zeros(n)
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _ruiz(P: sp.csc_matrix, q: np.ndarray, A: sp.csc_matrix, iters: int):
    """Modified Ruiz equilibration of the KKT matrix plus a cost scale."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        cp, ca = _col_max(Ps, n), _col_max(As, n)
        ra = _col_max(As.T.tocsc(), m) if m else np.zeros(0)
        dn = np.maximum(cp, ca)
        dn = np.where(dn > 0, 1.0 / np.sqrt(np.clip(dn, 1e-4, 1e4)), 1.0)
        em = np.where(ra > 0, 1.0 / np.sqrt(np.clip(ra, 1e-4, 1e4)), 1.0)
        Dn, Em = sp.diags(dn), sp.diags(em)
        Ps = (Dn @ Ps @ Dn).tocsc()
        As = (Em @ As @ Dn).tocsc()
        qs = dn * qs
        D *= dn
        E *= em
    mean_p = float(np.mean(_col_max(Ps, n))) if n else 1.0
    c = min(1.0 / max(mean_p, _inf_norm(qs), 1e-4), 1e4)
    return (Ps * c).tocsc(), qs * c, As, D, E, c


class _Scaled:
    """Scaled copy of the problem with helpers to map results back."""

    def __init__(self, P, q, A, l, u, s: SolverSettings):
        self.s = s
        self.P0, self.q0, self.A0, self.l0, self.u0 = P, q, A, l, u
        self.P, self.q, self.A, self.D, self.E, self.c = _ruiz(P, q, A, s.scaling_iter)
        self.l = np.where(l <= -INF, -np.inf, l * self.E)
        self.u = np.where(u >= INF, np.inf, u * self.E)
        self.n, self.m = P.shape[0], A.shape[0]
        self.eq = np.abs(l - u) <= 1e-12
        self.free = np.isinf(self.l) & np.isinf(self.u)

    def unscale(self, x, y):
        return self.D * x, self.E * y / self.c

    def residuals(self, x, z, y):
        """Unscaled primal/dual residual norms and their normalisers (OSQP style)."""
        Ax = self.A @ x
        Px = self.P @ x
        Aty = self.A.T @ y
        prim = _inf_norm((Ax - z) / self.E)
        dual = _inf_norm((Px + self.q + Aty) / self.D) / self.c
        ps = max(_inf_norm(Ax / self.E), _inf_norm(z / self.E))
        ds = max(_inf_norm(Px / self.D), _inf_norm(Aty / self.D), _inf_norm(self.q / self.D)) / self.c
        return prim, dual, ps, ds


def farkas_certificate(A, l, u, y: np.ndarray, eps: float = 1e-6) -> float | None:
    """Return ``||y||`` if ``y`` proves ``{x : l <= Ax <= u}`` empty, else ``None``.

    Conditions: ``A'y = 0`` and ``u'max(y, 0) + l'min(y, 0) < 0`` (relative to ``||y||``).
    """
    nrm = _inf_norm(y)
    if nrm < 1e-14:
        return None
    yn = y / nrm
    if _inf_norm(A.T @ yn) > eps:
        return None
    pos, neg = np.maximum(yn, 0), np.minimum(yn, 0)
    if np.any((pos > eps) & (u >= INF)) or np.any((neg < -eps) & (l <= -INF)):
        return None
    uu = np.where(u >= INF, 0.0, u)
    ll = np.where(l <= -INF, 0.0, l)
    if float(uu @ pos + ll @ neg) < -eps:
        return nrm
    return None


def residuals(P, q, A, l, u, x, y) -> dict:
    """Unscaled optimality measures for a primal/dual pair (``Px + q + A'y = 0`` convention)."""
    Ax = A @ x
    viol = np.maximum(l - Ax, 0) + np.maximum(Ax - u, 0)
    station = P @ x + q + A.T @ y
    ineq = np.abs(l - u) > 1e-12
    y_low, y_up = np.minimum(y, 0), np.maximum(y, 0)
    slack_low = np.where(l <= -INF, 0.0, np.abs(Ax - l))
    slack_up = np.where(u >= INF, 0.0, np.abs(u - Ax))
    comp = np.maximum(-y_low * slack_low, y_up * slack_up)
    bad_sign = np.where(l <= -INF, -y_low, 0.0) + np.where(u >= INF, y_up, 0.0)
    return {
        "primal": _inf_norm(viol),
        "stationarity": _inf_norm(station),
        "complementarity": _inf_norm(comp[ineq]),
        "dual_sign": _inf_norm(bad_sign[ineq]),
    }


def _polish(sc: _Scaled, x: np.ndarray, y: np.ndarray):
    """KKT solve on the active set guessed from an unscaled primal/dual pair."""
    s = sc.s
    P, q, A, l, u = sc.P0, sc.q0, sc.A0, sc.l0, sc.u0
    z = A @ x
    lower = ((z - l < -y) & (l > -INF)) | sc.eq
    upper = (u - z < y) & (u < INF) & ~lower
    act = np.flatnonzero(lower | upper)
    bound = np.where(lower[act], l[act], u[act])
    Aact = A[act]
    n, k = P.shape[0], len(act)
    K = sp.bmat([[P, Aact.T], [Aact, None]], format="csc") if k else P.tocsc()
    reg = sp.diags(np.concatenate([np.full(n, s.polish_delta), np.full(k, -s.polish_delta)]))
    try:
        lu = spla.splu((K + reg).tocsc(), permc_spec="COLAMD")
    except RuntimeError:
        return None
    rhs = np.concatenate([-q, bound])
    sol = lu.solve(rhs)
    for _ in range(s.refine_iter):
        res = rhs - K @ sol
        if _inf_norm(res) <= 1e-15 * max(1.0, _inf_norm(rhs)):
            break
        sol = sol + lu.solve(res)
    xp = sol[:n]
    yp = np.zeros(len(l))
    yp[act] = sol[n:]
    r = residuals(P, q, A, l, u, xp, yp)
    tol = 1e-7 * max(1.0, _inf_norm(yp))
    ya = yp[act]
    wrong = (lower[act] & ~sc.eq[act] & (ya > tol)) | (upper[act] & (ya < -tol))
    if wrong.any():
        return None
    return xp, yp, r


def _accept_polish(sc: _Scaled, pol, eps: float) -> bool:
    if pol is None:
        return False
    r = pol[2]
    return r["primal"] <= eps and r["stationarity"] <= eps


# ---------------------------------------------------------------- ADMM


class _AdmmWorkspace(_Scaled):
    def __init__(self, P, q, A, l, u, s: SolverSettings):
        super().__init__(P, q, A, l, u, s)
        self.rho = s.rho
        self.factor()

    def rho_vec(self) -> np.ndarray:
        r = np.full(self.m, self.rho)
        r[self.eq] = min(RHO_EQ_FACTOR * self.rho, RHO_MAX)
        r[self.free] = RHO_MIN
        return r

    def factor(self) -> None:
        self.rv = self.rho_vec()
        K = self.P + self.s.sigma * sp.identity(self.n, format="csc") + self.A.T @ sp.diags(self.rv) @ self.A
        self.lu = spla.splu(K.tocsc(), permc_spec="COLAMD")


def _equality_start(sc: _Scaled) -> np.ndarray:
    """Minimiser of the (scaled) cost on the equality rows alone."""
    Ae = sc.A[sc.eq]
    ne = Ae.shape[0]
    H = (sc.P + 1e-8 * sp.identity(sc.n)).tocsc()
    K = sp.bmat([[H, Ae.T], [Ae, -1e-10 * sp.identity(ne)]], format="csc") if ne else H
    rhs = np.concatenate([-sc.q, sc.l[sc.eq]])
    try:
        return spla.splu(K, permc_spec="COLAMD").solve(rhs)[: sc.n]
    except RuntimeError:
        return np.zeros(sc.n)


def _admm_block(P, q, A, l, u, s: SolverSettings, x0=None) -> QPResult:
    ws = _AdmmWorkspace(P, q, A, l, u, s)
    x = _equality_start(ws) if x0 is None else x0 / ws.D
    z = np.clip(ws.A @ x, ws.l, ws.u)
    y = np.zeros(ws.m)
    status, cert = "max_iterations", None
    tight = not s.polish
    it = 0
    while it < s.max_iter:
        it += 1
        rhs = s.sigma * x - ws.q + ws.A.T @ (ws.rv * z - y)
        xt = ws.lu.solve(rhs)
        zt = ws.A @ xt
        x_new = s.alpha * xt + (1 - s.alpha) * x
        zr = s.alpha * zt + (1 - s.alpha) * z
        z_new = np.clip(zr + y / ws.rv, ws.l, ws.u)
        y_new = y + ws.rv * (zr - z_new)
        dy = y_new - y
        x, z, y = x_new, z_new, y_new
        if it % s.check_every:
            continue
        cert = farkas_certificate(ws.A0, ws.l0, ws.u0, ws.E * dy / ws.c, s.eps_pinf)
        if cert is not None:
            status = "primal_infeasible"
            break
        prim, dual, ps, ds = ws.residuals(x, z, y)
        ea = s.eps_abs if tight else max(s.eps_loose, s.eps_abs)
        er = s.eps_rel if tight else max(s.eps_loose, s.eps_rel)
        if prim <= ea + er * ps and dual <= ea + er * ds:
            if s.polish:
                pol = _polish(ws, *ws.unscale(x, y))
                if _accept_polish(ws, pol, s.eps_abs):
                    xp, yp, r = pol
                    obj = 0.5 * xp @ (P @ xp) + q @ xp
                    return QPResult(xp, yp, "solved", it, r["primal"], r["stationarity"], obj, True)
            if tight:
                status = "solved"
                break
            tight = True
        if it % s.adapt_every == 0 and prim > 0 and dual > 0:
            ratio = (prim / max(ps, 1e-10)) / (dual / max(ds, 1e-10))
            new_rho = float(np.clip(ws.rho * np.sqrt(ratio), RHO_MIN, RHO_MAX))
            if new_rho > s.adapt_tolerance * ws.rho or new_rho < ws.rho / s.adapt_tolerance:
                ws.rho = new_rho
                ws.factor()
    xu, yu = ws.unscale(x, y)
    prim, dual, _, _ = ws.residuals(x, z, y)
    obj = 0.5 * xu @ (P @ xu) + q @ xu
    if status == "primal_infeasible":
        yu = ws.E * dy / ws.c
    return QPResult(xu, yu, status, it, prim, dual, obj, False, certificate=cert)


# ---------------------------------------------------------------- interior point


def _ipm_block(P, q, A, l, u, s: SolverSettings, x0=None) -> QPResult:
    sc = _Scaled(P, q, A, l, u, s)
    n = sc.n
    eq = np.flatnonzero(sc.eq)
    lo_rows = np.flatnonzero(~sc.eq & np.isfinite(sc.l))
    up_rows = np.flatnonzero(~sc.eq & np.isfinite(sc.u))
    Ae = sc.A[eq].tocsc()
    b = sc.l[eq]
    C = sp.vstack([sc.A[lo_rows], -sc.A[up_rows]]).tocsc()
    d = np.concatenate([sc.l[lo_rows], -sc.u[up_rows]])
    ne, mc = len(eq), C.shape[0]
    Ps, qs = sc.P, sc.q
    Ct = C.T.tocsc()
    reg = 1e-10

    def kkt_factor(w):
        # Factor a quasi-definite regularisation; refine against the exact
        # matrix so dependent equality rows do not leave a residual.
        H = (Ps + Ct @ sp.diags(w) @ C).tocsc()
        K = sp.bmat([[H, Ae.T], [Ae, None]], format="csc") if ne else H
        shift = sp.diags(np.concatenate([np.full(n, reg), np.full(ne, -reg)]))
        return spla.splu((K + shift).tocsc(), permc_spec="COLAMD"), K

    def kkt_solve(lu, K, r1, r2):
        rhs = np.concatenate([r1, r2])
        sol = lu.solve(rhs)
        for _ in range(s.refine_iter):
            res = rhs - K @ sol
            if _inf_norm(res) <= 1e-14 * max(1.0, _inf_norm(rhs)):
                break
            sol = sol + lu.solve(res)
        return sol[:n], sol[n:]

    # Start: minimise 0.5x'Px + q'x + 0.5|Cx - d|^2 on the equalities, then
    # push the slack and multiplier guesses into the interior.
    lu0, K0 = kkt_factor(np.ones(mc))
    x, nu = kkt_solve(lu0, K0, -qs + Ct @ d, b)
    if x0 is not None:
        x = x0 / sc.D
    nu = -nu
    r0 = C @ x - d
    sl, lam = r0.copy(), -r0
    for v in (sl, lam):
        if v.size:
            low = -float(v.min())
            v += (1.0 + low) if low >= 0 else 0.0
            np.maximum(v, 1e-8, out=v)
    status, cert = "max_iterations", None
    e_c = np.concatenate([sc.E[lo_rows], sc.E[up_rows]])
    best, best_merit, since_best = None, np.inf, 0
    it = 0
    for it in range(1, s.ipm_max_iter + 1):
        Aty = (Ae.T @ nu if ne else 0) + Ct @ lam
        rd = Ps @ x + qs - Aty
        re = Ae @ x - b if ne else np.zeros(0)
        rc = C @ x - sl - d
        mu = float(sl @ lam) / mc if mc else 0.0
        y_full = np.zeros(sc.m)
        y_full[eq] = -nu
        y_full[lo_rows] -= lam[: len(lo_rows)]
        y_full[up_rows] += lam[len(lo_rows):]
        # Relative measures in unscaled units.
        pr = max(_inf_norm(re / sc.E[eq]) if ne else 0.0, _inf_norm(rc / e_c) if mc else 0.0)
        ds_norm = max(1.0, _inf_norm((Ps @ x) / sc.D), _inf_norm(Aty / sc.D)) / sc.c
        du = _inf_norm(rd / sc.D) / sc.c / ds_norm
        gap = mu / sc.c
        merit = max(pr, du, gap)
        if merit < best_merit:
            best, best_merit, since_best = (x.copy(), y_full.copy()), merit, 0
        else:
            since_best += 1
        if merit <= 1e-11 or (best_merit <= 1e-8 and since_best >= 3):
            break
        if mc and _inf_norm(lam) > 1e8:
            cert = farkas_certificate(sc.A0, sc.l0, sc.u0, sc.E * y_full, s.eps_pinf)
            if cert is not None:
                status = "primal_infeasible"
                break
        w = lam / sl
        lu, K = kkt_factor(w)
        rs = sl * lam

        # ds = C dx + rc, dlam = (-rs - lam ds) / s, hence
        # (P + C'WC) dx - Ae' dnu = -rd - C'((rs + lam rc) / s)
        def solve_dir(rs_vec):
            r1 = -rd - Ct @ ((rs_vec + lam * rc) / sl)
            dx, dnu_neg = kkt_solve(lu, K, r1, -re if ne else np.zeros(0))
            ds = C @ dx + rc
            return dx, -dnu_neg, ds, (-rs_vec - lam * ds) / sl

        dx_a, _, ds_a, dl_a = solve_dir(rs)
        a = min(_max_step(sl, ds_a), _max_step(lam, dl_a))
        mu_aff = float((sl + a * ds_a) @ (lam + a * dl_a)) / mc if mc else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dnu, ds, dl = solve_dir(rs + ds_a * dl_a - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(sl, ds), _max_step(lam, dl)))
        x = x + a * dx
        nu = nu + a * dnu
        sl = sl + a * ds
        lam = lam + a * dl
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            break
    if status == "primal_infeasible":
        return QPResult(sc.D * x, sc.E * y_full, status, it, np.inf, np.inf, np.nan, False, certificate=cert)
    xu, yu = sc.unscale(*best) if best is not None else sc.unscale(x, y_full)
    r = residuals(P, q, A, l, u, xu, yu)
    res = QPResult(xu, yu, "max_iterations", it, r["primal"], r["stationarity"], 0.5 * xu @ (P @ xu) + q @ xu, False,
                   info={"merit": best_merit})
    ok = r["primal"] <= s.eps_abs and r["stationarity"] <= s.eps_abs and r["complementarity"] <= s.eps_abs
    if ok:
        res.status = "solved"
    if s.polish and best_merit <= 1e-4:
        pol = _polish(sc, xu, yu)
        if _accept_polish(sc, pol, s.eps_abs):
            xp, yp, rp = pol
            if not ok or rp["stationarity"] <= r["stationarity"]:
                res = QPResult(xp, yp, "solved", it, rp["primal"], rp["stationarity"], 0.5 * xp @ (P @ xp) + q @ xp,
                               True, info={"merit": best_merit})
    return res


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


# ---------------------------------------------------------------- driver


def solve_qp(P, q, A, l, u, settings: SolverSettings | None = None, decompose: bool = True) -> QPResult:
    """Solve the QP; independent variable blocks are solved separately."""
    s = settings or SolverSettings()
    t0 = time.perf_counter()
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q = np.asarray(q, dtype=float)
    l = np.clip(np.asarray(l, dtype=float), -INF, INF)
    u = np.clip(np.asarray(u, dtype=float), -INF, INF)
    n, m = P.shape[0], A.shape[0]
    if np.any(l > u):
        bad = int(np.flatnonzero(l > u)[0])
        return QPResult(np.zeros(n), np.zeros(m), "primal_infeasible", wall_time=time.perf_counter() - t0,
                        certificate=float(l[bad] - u[bad]), info={"reason": "empty_row_interval"})
    Acsr = A.tocsr()
    rows_nz = np.diff(Acsr.indptr) > 0
    if np.any(((l > 1e-12) | (u < -1e-12)) & ~rows_nz):
        return QPResult(np.zeros(n), np.zeros(m), "primal_infeasible", wall_time=time.perf_counter() - t0,
                        certificate=1.0, info={"reason": "empty_row"})
    if decompose:
        pat = A.copy()
        pat.data = np.ones_like(pat.data)
        ncomp, labels = connected_components((abs(P) + pat.T @ pat).tocsr(), directed=False)
    else:
        ncomp, labels = 1, np.zeros(n, dtype=int)
    row_block = np.full(m, -1)
    row_block[rows_nz] = labels[Acsr.indices[Acsr.indptr[:-1][rows_nz]]]
    block_solver = _ipm_block if s.method == "ipm" else _admm_block
    x, y = np.zeros(n), np.zeros(m)
    statuses, iters, prims, duals, polished, cert = [], 0, [0.0], [0.0], True, None
    for b in range(ncomp):
        cols = np.flatnonzero(labels == b)
        rows = np.flatnonzero(row_block == b)
        r = block_solver(P[cols][:, cols], q[cols], Acsr[rows][:, cols].tocsc(), l[rows], u[rows], s)
        x[cols] = r.x
        y[rows] = r.y
        statuses.append(r.status)
        iters = max(iters, r.iterations)
        prims.append(r.prim_res)
        duals.append(r.dual_res)
        polished &= r.polished
        if r.status == "primal_infeasible":
            cert = r.certificate
            break
    if "primal_infeasible" in statuses:
        status = "primal_infeasible"
    elif all(st == "solved" for st in statuses):
        status = "solved"
    else:
        status = "max_iterations"
    obj = 0.5 * x @ (P @ x) + q @ x
    return QPResult(x, y, status, iters, max(prims), max(duals), obj, polished,
                    time.perf_counter() - t0, cert, {"components": int(ncomp), "method": s.method})
