"""Dense convex QP solver by operator splitting (ADMM).

Solves

    minimize    1/2 x'Px + q'x
    subject to  l <= A x <= u            (rows outside ball blocks)
                || A_b x - c_b || <= r_b  (each ball block b)

following the OSQP iteration: a regularised KKT step for ``x``,
projection onto the constraint set for ``z`` and a scaled dual update.
An optional polishing step re-solves the equality-constrained problem on
the detected active set, which recovers the exact solution when the
active set is right.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

SOLVED = "solved"
PRIMAL_INFEASIBLE = "primal_infeasible"
MAX_ITER = "max_iter_reached"

CHECK_EVERY = 10
ADAPT_EVERY = 50
RHO_MIN, RHO_MAX = 1e-6, 1e6
EQ_RHO_FACTOR = 1e3


@dataclass
class Ball:
    """Rows ``start:stop`` of A must lie in the ball of ``radius`` around ``center``."""

    start: int
    stop: int
    center: np.ndarray
    radius: float


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int = 0
    prim_res: float = np.inf
    dual_res: float = np.inf
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


class _Problem:
    def __init__(self, P, q, A, l, u, balls):
        self.P = np.asarray(P, dtype=float)
        self.q = np.asarray(q, dtype=float).reshape(-1)
        self.n = self.q.size
        A = np.asarray(A, dtype=float)
        self.A = A.reshape(-1, self.n) if A.size else np.zeros((0, self.n))
        self.m = self.A.shape[0]
        self.l = np.full(self.m, -np.inf) if l is None else np.asarray(l, dtype=float).reshape(-1).copy()
        self.u = np.full(self.m, np.inf) if u is None else np.asarray(u, dtype=float).reshape(-1).copy()
        self.balls = list(balls)
        self.box = np.ones(self.m, dtype=bool)
        for b in self.balls:
            self.box[b.start:b.stop] = False
            self.l[b.start:b.stop] = -np.inf
            self.u[b.start:b.stop] = np.inf
        if np.any(self.l[self.box] > self.u[self.box]):
            raise ValueError("lower bound above upper bound")

    def project(self, v):
        z = np.clip(v, self.l, self.u)
        for b in self.balls:
            d = v[b.start:b.stop] - b.center
            nd = np.linalg.norm(d)
            z[b.start:b.stop] = b.center + (d if nd <= b.radius else d * (b.radius / nd))
        return z

    def violation(self, x):
        Ax = self.A @ x
        viol = np.zeros(self.m)
        viol[self.box] = np.maximum(np.maximum(self.l - Ax, Ax - self.u), 0.0)[self.box]
        worst = float(viol.max(initial=0.0))
        for b in self.balls:
            worst = max(worst, float(np.linalg.norm(Ax[b.start:b.stop] - b.center) - b.radius))
        return worst

    def support(self, dy):
        """Support function of the constraint set evaluated at ``dy``."""
        s = 0.0
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        bx = self.box
        with np.errstate(invalid="ignore"):
            up = np.where(pos[bx] > 0, self.u[bx] * pos[bx], 0.0)
            lo = np.where(neg[bx] < 0, self.l[bx] * neg[bx], 0.0)
        s += float(np.sum(up) + np.sum(lo))
        for b in self.balls:
            d = dy[b.start:b.stop]
            s += float(b.center @ d + b.radius * np.linalg.norm(d))
        return s


def _row_scaling(A, balls) -> np.ndarray:
    """Row scaling to unit norm; ball blocks share one factor so the ball stays a ball."""
    norms = np.linalg.norm(A, axis=1)
    D = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    for b in balls:
        blk = norms[b.start:b.stop]
        top = float(blk.max(initial=0.0))
        D[b.start:b.stop] = 1.0 / top if top > 0 else 1.0
    return D


def _kkt_factor(P, A, rho, sigma):
    M = P + sigma * np.eye(P.shape[0]) + A.T @ (rho[:, None] * A)
    return sla.cho_factor(M, lower=True, check_finite=False)


def _polish(prob: _Problem, x, y, thr: float = 1e-9):
    """Equality-constrained re-solve on the active set guessed from ``y``."""
    rows, rhs, kind = [], [], []
    A = prob.A
    for i in np.flatnonzero(prob.box):
        if y[i] > thr and np.isfinite(prob.u[i]):
            rows.append(A[i]); rhs.append(prob.u[i]); kind.append(("u", i))
        elif y[i] < -thr and np.isfinite(prob.l[i]):
            rows.append(A[i]); rhs.append(prob.l[i]); kind.append(("l", i))
    for j, b in enumerate(prob.balls):
        yb = y[b.start:b.stop]
        nb = np.linalg.norm(yb)
        if nb > thr:
            nrm = yb / nb
            rows.append(nrm @ A[b.start:b.stop]); rhs.append(b.radius + nrm @ b.center); kind.append(("b", j, nrm))
    n = prob.n
    k = len(rows)
    Aact = np.array(rows).reshape(k, n)
    K = np.block([[prob.P, Aact.T], [Aact, np.zeros((k, k))]])
    rhs_full = np.concatenate([-prob.q, np.asarray(rhs, dtype=float)])
    delta = 1e-11 * max(1.0, float(np.abs(prob.P).max(initial=0.0)))
    Kreg = K + np.diag(np.concatenate([np.full(n, delta), np.full(k, -delta)]))
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = sla.lu_solve(lu, rhs_full, check_finite=False)
    for _ in range(5):
        sol = sol + sla.lu_solve(lu, rhs_full - K @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[:n]
    yp = np.zeros(prob.m)
    for lam, kd in zip(sol[n:], kind):
        if kd[0] in ("u", "l"):
            yp[kd[1]] = lam
        else:
            b = prob.balls[kd[1]]
            yp[b.start:b.stop] = lam * kd[2]
    # dual sign checks: upper multipliers >= 0, lower <= 0, ball >= 0
    for lam, kd in zip(sol[n:], kind):
        if kd[0] == "u" and lam < -1e-9 * (1 + abs(lam)):
            return None
        if kd[0] == "l" and lam > 1e-9 * (1 + abs(lam)):
            return None
        if kd[0] == "b" and lam < -1e-9 * (1 + abs(lam)):
            return None
    return xp, yp


def _residuals(prob: _Problem, x, z, y):
    Ax = prob.A @ x
    Px = prob.P @ x
    Aty = prob.A.T @ y
    prim = float(np.max(np.abs(Ax - z), initial=0.0))
    dual = float(np.max(np.abs(Px + prob.q + Aty), initial=0.0))
    prim_scale = max(float(np.max(np.abs(Ax), initial=0.0)), float(np.max(np.abs(z), initial=0.0)))
    dual_scale = max(float(np.max(np.abs(Px), initial=0.0)), float(np.max(np.abs(Aty), initial=0.0)),
                     float(np.max(np.abs(prob.q), initial=0.0)))
    return prim, dual, prim_scale, dual_scale


def _accept_polish(prob: _Problem, xp, yp, eps):
    prim, dual, ps, ds = _residuals(prob, xp, prob.project(prob.A @ xp), yp)
    viol = prob.violation(xp)
    ok = viol <= eps * (1 + ps) and dual <= eps * (1 + ds)
    return ok, viol, dual


def solve_qp(P, q, A=None, l=None, u=None, balls: Sequence[Ball] = (), x0=None, y0=None,
             eps: float = 1e-8, max_iter: int = 100_000, rho: float = 0.1, sigma: float = 1e-6,
             alpha: float = 1.6, polish: bool = True, eps_infeasible: float = 1e-7) -> QPResult:
    """Solve a dense convex QP; see the module docstring for the problem form.

    ``eps`` is the absolute and relative tolerance on the primal residual
    ``||Ax - z||_inf`` and dual residual ``||Px + q + A'y||_inf``.
    Warm starts (``x0``, ``y0``) are used both to seed the iteration and
    to try polishing on the previous active set before iterating; polishing
    is retried every ``ADAPT_EVERY`` iterations. Rows are scaled to unit
    norm internally and the returned duals refer to the original rows.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    if A is None:
        A = np.zeros((0, q.size))
    A = np.asarray(A, dtype=float).reshape(-1, q.size)
    D = _row_scaling(A, balls)
    scaled_balls = [Ball(b.start, b.stop, b.center * D[b.start], b.radius * D[b.start]) for b in balls]
    lo = None if l is None else np.asarray(l, dtype=float) * D
    up = None if u is None else np.asarray(u, dtype=float) * D
    prob = _Problem(P, q, A * D[:, None], lo, up, scaled_balls)
    n, m = prob.n, prob.m

    def unscale(res: QPResult) -> QPResult:
        res.y = res.y * D
        return res

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) / D

    if polish and y0 is not None and m:
        pol = _polish(prob, x, y)
        if pol is not None:
            ok, viol, dual = _accept_polish(prob, *pol, eps)
            if ok:
                return unscale(QPResult(pol[0], pol[1], SOLVED, 0, viol, dual, True))

    if m == 0:
        c, low = sla.cho_factor(prob.P + 1e-14 * np.eye(n), lower=True)
        xs = sla.cho_solve((c, low), -q)
        return unscale(QPResult(xs, y, SOLVED, 0, 0.0, float(np.max(np.abs(prob.P @ xs + q))), False))

    eq = prob.box & (np.abs(prob.u - prob.l) <= 1e-12)
    loose = prob.box & np.isinf(prob.l) & np.isinf(prob.u)
    base = np.where(eq, EQ_RHO_FACTOR, 1.0)
    base[loose] = RHO_MIN
    rho_vec = rho * base
    fac = _kkt_factor(prob.P, prob.A, rho_vec, sigma)
    z = prob.project(prob.A @ x)
    y_check = y.copy()
    status = MAX_ITER
    prim = dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + prob.A.T @ (rho_vec * z - y)
        xt = sla.cho_solve(fac, rhs, check_finite=False)
        zt = prob.A @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = prob.project(zr + y / rho_vec)
        y = y + rho_vec * (zr - z_new)
        z = z_new

        if it % CHECK_EVERY:
            continue
        prim, dual, ps, ds = _residuals(prob, x, z, y)
        if prim <= eps * (1 + ps) and dual <= eps * (1 + ds):
            status = SOLVED
            break
        dy = y - y_check
        y_check = y.copy()
        ndy = float(np.max(np.abs(dy), initial=0.0))
        if ndy > 1e-12:
            if (np.max(np.abs(prob.A.T @ dy)) <= eps_infeasible * ndy
                    and prob.support(dy) < -eps_infeasible * ndy):
                status = PRIMAL_INFEASIBLE
                break
        if it % ADAPT_EVERY == 0:
            if polish:
                pol = _polish(prob, x, y)
                if pol is not None:
                    ok, viol, dual_p = _accept_polish(prob, *pol, eps)
                    if ok:
                        return unscale(QPResult(pol[0], pol[1], SOLVED, it, viol, dual_p, True))
            ratio = np.sqrt((prim / max(ps, 1e-30)) / max(dual / max(ds, 1e-30), 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                new_rho = float(np.clip(rho * ratio, RHO_MIN, RHO_MAX))
                if new_rho != rho:
                    rho = new_rho
                    rho_vec = rho * base
                    fac = _kkt_factor(prob.P, prob.A, rho_vec, sigma)

    result = QPResult(x, y, status, it, prim, dual, False)
    if status == PRIMAL_INFEASIBLE:
        return unscale(result)
    if polish:
        pol = _polish(prob, x, y)
        if pol is not None:
            ok, viol, dual_p = _accept_polish(prob, *pol, eps)
            if ok:
                return unscale(QPResult(pol[0], pol[1], SOLVED, it, viol, dual_p, True))
    return unscale(result)
