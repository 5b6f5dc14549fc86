"""Gain design, observer, terminal set and the tightened receding-horizon
controller, plus the baseline controllers.

Closed loop (one step)::

    u_t     = K (x_hat_t - z_t) + v*_0
    z_t+1   = A z_t + B v*_0
    x_hat+  = A x_hat + B u + L (y_t+1 - C (A x_hat + B u))

The receding-horizon problem is condensed onto the nominal inputs
``v_0..v_{H-1}``. The certainty-equivalent deviation ``x_bar - z``
evolves as ``(A + BK)^i (x_hat - z)`` independently of ``v``, so the cost
is a quadratic in ``v`` with a fixed Hessian. Constraints on ``[z_i; v_i]``
are the robust forms from :mod:`sgmpc.constraints` against the PRS entry
of step ``t + i``; the nonlinear ones are handled by sequential
linearisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import sets
from .constraints import S_PX, S_U_NEG, S_U_POS, FunnelConstraints
from .qp import Ball, solve_qp
from .uncertainty import PRSSchedule, spectral_radius

DARE_TOL = 1e-10
DARE_MAX_ITER = 100_000
SQP_MAX_ITER = 5
SQP_STEP_TOL = 1e-10
ACCEPT_TOL = 1e-6
QP_EPS = 1e-8
QP_MAX_ITER = 100_000
ROW_MARGIN = 1e-9
BACKTRACK_STEPS = 12


class DesignError(ValueError):
    """Gain or terminal-set design failed."""


class InfeasibleError(RuntimeError):
    """The receding-horizon problem has no solution; ``reason`` names the failing set."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"infeasible ({reason}){': ' + detail if detail else ''}")
        self.reason = reason
        self.detail = detail


# ---------------------------------------------------------------------------
# gains

def dare(A, B, Q, R, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER) -> np.ndarray:
    """Stabilising DARE solution by Riccati fixed-point iteration from ``S = Q``.

    Stops when ``||S_next - S||_max <= tol * max(1, ||S||_max)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    S = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            BtS = B.T @ S
            gain = np.linalg.solve(R + BtS @ B, BtS @ A)
            S_next = Q + A.T @ S @ A - A.T @ S @ B @ gain
            S_next = 0.5 * (S_next + S_next.T)
            if not np.all(np.isfinite(S_next)):
                break
            if np.max(np.abs(S_next - S)) <= tol * max(1.0, float(np.max(np.abs(S_next)))):
                return S_next
            S = S_next
    raise DesignError("Riccati iteration did not converge; the pair may not be stabilisable")


def dare_residual(A, B, Q, R, S) -> float:
    A, B, Q, R, S = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R, S))
    rhs = Q + A.T @ S @ A - A.T @ S @ B @ np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    return float(np.max(np.abs(rhs - S)))


def lqr_gain(A, B, S, R) -> np.ndarray:
    """``K = -(R + B'SB)^-1 B'SA`` for ``u = K x``."""
    return -np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)


def kalman_gain(A, C, Sigma_w, Sigma_v) -> np.ndarray:
    """Steady-state gain of the predictor-corrector observer via the dual Riccati equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Pp = dare(A.T, C.T, np.atleast_2d(Sigma_w), np.atleast_2d(Sigma_v))
    return Pp @ C.T @ np.linalg.inv(C @ Pp @ C.T + np.atleast_2d(Sigma_v))


@dataclass(frozen=True, eq=False)
class Gains:
    K: np.ndarray
    L: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("K", "L", "P", "Q", "R")}


def lyapunov_residual(Acl, W, P) -> float:
    return float(np.max(np.abs(Acl.T @ P @ Acl + W - P)))


def design_gains(A, B, Q, R, L="table", C=None, Sigma_w=None, Sigma_v=None,
                 table_L: float = 0.99) -> Gains:
    """LQR feedback, observer gain and terminal weight.

    ``L`` is a matrix, ``"table"`` (``table_L * I``) or ``"kalman"``
    (requires ``Sigma_w`` and ``Sigma_v``). ``P`` solves
    ``P = (A+BK)' P (A+BK) + Q + K'RK``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    C = np.eye(n) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise DesignError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise DesignError("Q must be positive semidefinite")
    S = dare(A, B, Q, R)
    K = lqr_gain(A, B, S, R)
    Acl = A + B @ K
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise DesignError(f"A + BK is not Schur stable (spectral radius {rho:.6g}); "
                          "Q may not penalise the unstable modes")
    Wk = Q + K.T @ R @ K
    P = sla.solve_discrete_lyapunov(Acl.T, Wk)
    P = 0.5 * (P + P.T)
    if isinstance(L, str):
        if L == "table":
            Lm = table_L * np.eye(n, C.shape[0])
        elif L == "kalman":
            if Sigma_w is None or Sigma_v is None:
                raise DesignError("the Kalman gain needs Sigma_w and Sigma_v")
            Lm = kalman_gain(A, C, Sigma_w, Sigma_v)
        else:
            raise DesignError(f"unknown observer gain rule {L!r}")
    else:
        Lm = np.atleast_2d(np.asarray(L, dtype=float))
    obs = spectral_radius((np.eye(n) - Lm @ C) @ A)
    if obs >= 1.0:
        raise DesignError(f"(I - LC)A is not Schur stable (spectral radius {obs:.6g})")
    return Gains(K, Lm, P, Q, R)


# ---------------------------------------------------------------------------
# observer

@dataclass
class ControllerState:
    z: np.ndarray
    x_hat: np.ndarray
    t: int = 0
    plan: Optional[np.ndarray] = None
    duals: Optional[np.ndarray] = None
    last_u: Optional[np.ndarray] = None
    last_v: Optional[np.ndarray] = None
    plan_z0: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, mu0) -> "ControllerState":
        mu0 = np.asarray(mu0, dtype=float)
        return cls(mu0.copy(), mu0.copy())


def observer_update(state: ControllerState, u_t, y_next, L, A=None, B=None, C=None,
                    v_t=None) -> ControllerState:
    """Advance the estimate and the nominal state by one step.

    ``x_hat+ = A x_hat + B u + L (y+ - C (A x_hat + B u))``; with
    ``y_next=None`` only the prediction is applied. ``z+ = A z + B v``
    when ``v_t`` is given.
    """
    x_hat = np.asarray(state.x_hat, dtype=float)
    n = x_hat.size
    A = np.eye(n) if A is None else np.asarray(A, dtype=float)
    B = np.eye(n) if B is None else np.asarray(B, dtype=float)
    C = np.eye(n) if C is None else np.asarray(C, dtype=float)
    u_t = np.asarray(u_t, dtype=float)
    pred = A @ x_hat + B @ u_t
    if y_next is not None:
        pred = pred + np.asarray(L, dtype=float) @ (np.asarray(y_next, dtype=float) - C @ pred)
    z = state.z if v_t is None else A @ state.z + B @ np.asarray(v_t, dtype=float)
    return ControllerState(z, pred, state.t + 1, state.plan, state.duals, u_t, v_t, state.plan_z0)


# ---------------------------------------------------------------------------
# terminal set

@dataclass(frozen=True, eq=False)
class TerminalSet:
    """``{z : ||z - center||_P <= alpha}`` with law ``v = K (z - center) + v_center``."""

    P: np.ndarray
    alpha: float
    rho: float
    center: np.ndarray
    v_center: np.ndarray

    def contains(self, z, tol: float = 1e-9) -> bool:
        if math.isinf(self.alpha):
            return True
        d = np.asarray(z, dtype=float) - self.center
        return float(math.sqrt(max(d @ self.P @ d, 0.0))) <= self.alpha + tol

    def to_dict(self) -> dict:
        return {"alpha": None if math.isinf(self.alpha) else self.alpha, "rho": self.rho,
                "center": self.center.tolist(), "v_center": self.v_center.tolist()}


def _psd_sqrt(P) -> tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    if np.min(w) <= 0:
        raise DesignError("terminal weight must be positive definite")
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def contraction_factor(Acl, P) -> float:
    Ph, Pmh = _psd_sqrt(P)
    return float(np.linalg.norm(Ph @ Acl @ Pmh, 2))


def _level_alpha(constraints, center, v_center, summaries, b_unit, tol: float = 1e-12) -> float:
    """Largest alpha with ``G(center, v_center; b + alpha b_unit) <= 0`` for every summary."""
    def worst(alpha):
        return max(float(np.max(constraints.values(center, v_center, b + alpha * b_unit), initial=-np.inf))
                   for b in summaries)

    if constraints.n_constraints == 0:
        return math.inf
    if worst(0.0) > 0:
        return 0.0
    hi = 1.0
    while worst(hi) <= 0:
        hi *= 2.0
        if hi > 1e12:
            return math.inf
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if worst(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def build_terminal_set(gains: Gains, summaries, constraints, A=None, B=None, center=None,
                       require_nonempty: bool = True) -> TerminalSet:
    """P-ellipsoid terminal set admissible for every summary in ``summaries``.

    ``summaries`` are deviation summaries (``constraints.summary(E)``) of
    every PRS entry the terminal set may meet. The terminal law keeps
    ``[z; v]`` inside ``[center; v_center] + alpha [I; K] P^-1/2 B``, so
    constraint admissibility reduces to the robust constraint values at
    the centre with the unit-ellipsoid summary scaled by ``alpha``.
    """
    K, P = gains.K, gains.P
    m, n = K.shape
    A = np.eye(n) if A is None else np.asarray(A, dtype=float)
    B = np.eye(n, m) if B is None else np.asarray(B, dtype=float)
    Acl = A + B @ K
    rho = contraction_factor(Acl, P)
    if rho >= 1.0:
        raise DesignError(f"P does not contract under A + BK (factor {rho:.6g})")
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    v_center, *_ = np.linalg.lstsq(B, center - A @ center, rcond=None)
    if np.max(np.abs(A @ center + B @ v_center - center), initial=0.0) > 1e-12:
        raise DesignError("terminal centre is not an equilibrium of the nominal dynamics")
    _, Pmh = _psd_sqrt(P)
    unit = sets.Ellipsoid(np.zeros(n + m), np.vstack([np.eye(n), K]) @ Pmh)
    b_unit = constraints.summary(unit)
    alpha = _level_alpha(constraints, center, v_center, list(summaries), b_unit)
    if require_nonempty and alpha <= 0:
        raise InfeasibleError("terminal", "no terminal level satisfies the tightened constraints")
    return TerminalSet(P, alpha, rho, center, v_center)


def funnel_terminal_set(gains: Gains, summaries, constraints: FunnelConstraints,
                        backoffs=(0.5, 1.0, 1.5, 2.0, 3.0, 4.0)) -> TerminalSet:
    """Terminal set centred on the drilling axis, backed off from the break-through plane.

    The origin lies on the break-through plane, so the centre is placed
    at ``p_x = -c * s`` with ``s = max(max s_px, 0.1 c_x)`` and ``c``
    chosen from ``backoffs`` to maximise the level. The floor keeps the
    centre off the plane when the deviation sets are degenerate.
    """
    s_px = max(max(float(b[S_PX]) for b in summaries), 0.1 * constraints.fp.c_x)
    best = None
    for c in backoffs:
        center = np.zeros(constraints.n)
        center[0] = -c * s_px
        ts = build_terminal_set(gains, summaries, constraints, center=center, require_nonempty=False)
        if best is None or ts.alpha > best.alpha:
            best = ts
    if best.alpha <= 0:
        raise InfeasibleError("terminal", "no terminal level satisfies the tightened constraints")
    return best


# ---------------------------------------------------------------------------
# receding-horizon problem

@dataclass
class MPCDiagnostics:
    feasible: bool = True
    fallback: bool = False
    sqp_iterations: int = 0
    qp_iterations: int = 0
    status: str = "ok"
    max_violation: float = 0.0


class _Condensed:
    """Prediction matrices and the fixed cost Hessian for horizon ``H``."""

    def __init__(self, A, B, gains: Gains, H: int):
        n, m = B.shape
        self.n, self.m, self.H = n, m, H
        self.A, self.B = A, B
        K = gains.K
        Phi = A + B @ K
        self.Apow = np.empty((H + 1, n, n))
        self.Phipow = np.empty((H + 1, n, n))
        self.Apow[0] = self.Phipow[0] = np.eye(n)
        for i in range(1, H + 1):
            self.Apow[i] = A @ self.Apow[i - 1]
            self.Phipow[i] = Phi @ self.Phipow[i - 1]
        # z_i = Apow[i] z0 + Gz[i] v
        self.Gz = np.zeros((H + 1, n, H * m))
        for i in range(1, H + 1):
            for j in range(i):
                self.Gz[i, :, j * m:(j + 1) * m] = self.Apow[i - 1 - j] @ B
        Q, R, P = gains.Q, gains.R, gains.P
        Hq = np.zeros((H * m, H * m))
        for i in range(1, H):
            Hq += self.Gz[i].T @ Q @ self.Gz[i]
        Hq += self.Gz[H].T @ P @ self.Gz[H]
        Hq += np.kron(np.eye(H), R)
        self.Hq = 0.5 * (Hq + Hq.T)
        self.K, self.Q, self.R, self.P = K, Q, R, P

    def linear_term(self, z0, d0) -> np.ndarray:
        H, m = self.H, self.m
        f = np.zeros(H * m)
        for i in range(1, H + 1):
            off = self.Apow[i] @ z0 + self.Phipow[i] @ d0
            W = self.P if i == H else self.Q
            f += self.Gz[i].T @ (W @ off)
        for i in range(H):
            f[i * m:(i + 1) * m] += self.R @ (self.K @ (self.Phipow[i] @ d0))
        return f

    def nominal_states(self, z0, v) -> np.ndarray:
        return np.einsum("hij,j->hi", self.Apow, z0) + np.einsum("hij,j->hi", self.Gz, v)

    def cost(self, z0, d0, v) -> float:
        zs = self.nominal_states(z0, v)
        V = v.reshape(self.H, self.m)
        c = 0.0
        for i in range(self.H):
            xb = zs[i] + self.Phipow[i] @ d0
            u = V[i] + self.K @ (self.Phipow[i] @ d0)
            c += 0.5 * (xb @ self.Q @ xb + u @ self.R @ u)
        xb = zs[self.H] + self.Phipow[self.H] @ d0
        return c + 0.5 * xb @ self.P @ xb


class MPCController:
    """Tightened output-feedback MPC with a precomputed PRS schedule."""

    def __init__(self, A, B, C, gains: Gains, schedule: PRSSchedule, constraints,
                 horizon: int = 15, terminal: Optional[TerminalSet] = None, name: str = "ours",
                 summaries=None, qp_eps: float = QP_EPS, qp_max_iter: int = QP_MAX_ITER):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.gains = gains
        self.schedule = schedule
        self.constraints = constraints
        self.H = horizon
        self.name = name
        self.qp_eps = qp_eps
        self.qp_max_iter = qp_max_iter
        self.n, self.m = self.B.shape
        self.summaries = (summaries if summaries is not None
                          else [constraints.summary(e.E_total) for e in schedule.entries])
        if terminal is None:
            if isinstance(constraints, FunnelConstraints):
                terminal = funnel_terminal_set(gains, self.summaries, constraints)
            else:
                terminal = build_terminal_set(gains, self.summaries, constraints, self.A, self.B)
        self.terminal = terminal
        self.cond = _Condensed(self.A, self.B, gains, horizon)
        self.J = constraints.n_constraints
        if not math.isinf(terminal.alpha):
            self._Ph, _ = _psd_sqrt(gains.P)
        self.check_input_tightening()

    # -- helpers -----------------------------------------------------------

    def summary_at(self, t: int) -> np.ndarray:
        return self.summaries[self.schedule.index(t)]

    def check_input_tightening(self):
        """Refuse when some tightened input interval is empty."""
        if isinstance(self.constraints, FunnelConstraints):
            for b in self.summaries:
                width = 2 * self.constraints.u_bar - b[S_U_POS] - b[S_U_NEG]
                if np.any(width < 0):
                    raise InfeasibleError("input", "input tightening exceeds the input bound")

    def initial_state(self, mu0) -> ControllerState:
        return ControllerState.initial(mu0)

    def _stack_summaries(self, t: int) -> np.ndarray:
        return np.array([self.summary_at(t + i) for i in range(self.H)])

    def _evaluate(self, z0, v, bs, grad: bool):
        zs = self.cond.nominal_states(z0, v)
        V = v.reshape(self.H, self.m)
        return zs, self.constraints.values(zs[:self.H], V, bs, grad=grad)

    def _violation(self, z0, v, bs, skip_first_state) -> float:
        zs, G = self._evaluate(z0, v, bs, False)
        G = np.array(G)
        if skip_first_state is not None:
            G[0, skip_first_state] = -np.inf
        worst = float(np.max(G, initial=-np.inf))
        if not math.isinf(self.terminal.alpha):
            d = zs[self.H] - self.terminal.center
            worst = max(worst, math.sqrt(max(d @ self.terminal.P @ d, 0.0)) - self.terminal.alpha)
        return worst

    def _terminal_law_plan(self, z0) -> np.ndarray:
        """Roll-out of the terminal law from ``z0``, used as the first linearisation point."""
        v = np.zeros(self.H * self.m)
        z = np.asarray(z0, dtype=float)
        ts = self.terminal
        for i in range(self.H):
            vi = self.gains.K @ (z - ts.center) + ts.v_center
            v[i * self.m:(i + 1) * self.m] = vi
            z = self.A @ z + self.B @ vi
        return v

    def shifted_candidate(self, state: ControllerState) -> Optional[np.ndarray]:
        """Previous plan shifted by one step with the terminal law appended."""
        if state.plan is None:
            return None
        z_end = self.cond.nominal_states(state.plan_z0, state.plan)[self.H]
        ts = self.terminal
        tail = self.gains.K @ (z_end - ts.center) + ts.v_center
        return np.concatenate([state.plan[self.m:], tail])

    # -- the QP for one linearisation ---------------------------------------

    def _qp(self, z0, d0, v_lin, bs, pre_rows, x0=None, y0=None):
        H, m, J = self.H, self.m, self.J
        zs, (G, dGx, dGv) = self._evaluate(z0, v_lin, bs, True)
        f = self.cond.linear_term(z0, d0)
        rows = np.zeros((H * J, H * m))
        upper = np.empty(H * J)
        for i in range(H):
            blk = slice(i * J, (i + 1) * J)
            rows[blk] = dGx[i] @ self.cond.Gz[i]
            rows[blk, i * m:(i + 1) * m] += dGv[i]
            upper[blk] = rows[blk] @ v_lin - G[i] - ROW_MARGIN
        lower = np.full(H * J, -np.inf)
        # rows fixed by the current nominal state are checked before the QP
        upper[pre_rows] = np.inf
        rows[pre_rows] = 0.0
        balls = []
        if not math.isinf(self.terminal.alpha):
            Ab = self._Ph @ self.cond.Gz[H]
            c = self._Ph @ (self.terminal.center - self.cond.Apow[H] @ z0)
            balls.append(Ball(H * J, H * J + self.n, c, self.terminal.alpha * (1 - 1e-9)))
            rows = np.vstack([rows, Ab])
            lower = np.concatenate([lower, np.full(self.n, -np.inf)])
            upper = np.concatenate([upper, np.full(self.n, np.inf)])
        return solve_qp(self.cond.Hq, f, rows, lower, upper, balls, x0=x0, y0=y0,
                        eps=self.qp_eps, max_iter=self.qp_max_iter)

    def solve(self, state: ControllerState, t: Optional[int] = None):
        """Solve the tightened problem at ``state``; returns ``(v_plan, duals, diagnostics)``.

        Raises :class:`InfeasibleError` when no feasible plan is found and
        no shifted candidate is available.
        """
        t = state.t if t is None else t
        H, m = self.H, self.m
        z0 = np.asarray(state.z, dtype=float)
        d0 = np.asarray(state.x_hat, dtype=float) - z0
        bs = self._stack_summaries(t)
        diag = MPCDiagnostics()

        # rows whose value does not depend on v_0 are fixed by z_t
        _, dGx0, dGv0 = self.constraints.values(z0, np.zeros(m), bs[0], grad=True)
        pre_rows = np.flatnonzero(~np.any(dGv0 != 0, axis=1))
        G0 = self.constraints.values(z0, np.zeros(m), bs[0])
        if pre_rows.size and np.max(G0[pre_rows]) > ACCEPT_TOL:
            if state.plan is None:
                j = int(pre_rows[np.argmax(G0[pre_rows])])
                raise InfeasibleError("state", f"constraint {self.constraints.names[j]!r} "
                                      "is violated at the initial nominal state")

        candidate = self.shifted_candidate(state)
        cand_ok = candidate is not None and self._violation(z0, candidate, bs, pre_rows) <= ACCEPT_TOL
        v_lin = candidate if candidate is not None else self._terminal_law_plan(z0)
        y = None
        if state.duals is not None and state.duals.size == H * self.J + (0 if math.isinf(self.terminal.alpha) else self.n):
            y = state.duals.copy()
            J = self.J
            y[:(H - 1) * J] = state.duals[J:H * J]
            y[(H - 1) * J:H * J] = 0.0
        best, best_y, best_cost = None, None, math.inf
        x_prev = v_lin
        qp_infeasible = False
        for k in range(SQP_MAX_ITER):
            res = self._qp(z0, d0, v_lin, bs, pre_rows, x0=x_prev, y0=y)
            diag.sqp_iterations += 1
            diag.qp_iterations += res.iterations
            if not res.solved:
                qp_infeasible = res.status == "primal_infeasible"
                break
            v_new = res.x
            y = res.y
            viol = self._violation(z0, v_new, bs, pre_rows)
            if viol <= ACCEPT_TOL:
                c = self.cond.cost(z0, d0, v_new)
                if c < best_cost:
                    best, best_y, best_cost = v_new, res.y, c
            step = float(np.max(np.abs(v_new - v_lin)))
            v_lin = v_new
            x_prev = v_new
            if step <= SQP_STEP_TOL * max(1.0, float(np.max(np.abs(v_new)))):
                break

        if best is None and cand_ok:
            # backtrack from the last iterate toward the feasible candidate
            direction = v_lin - candidate
            lam = 1.0
            for _ in range(BACKTRACK_STEPS):
                lam *= 0.5
                trial = candidate + lam * direction
                if self._violation(z0, trial, bs, pre_rows) <= ACCEPT_TOL:
                    best = trial
                    break
            if best is None:
                best = candidate
            diag.fallback = True
            diag.status = "fallback"
        if best is None:
            diag.feasible = False
            if state.plan is None:
                raise InfeasibleError("qp" if qp_infeasible else "sqp",
                                      "no feasible plan found at the initial state")
            diag.status = "infeasible"
            best = candidate if candidate is not None else v_lin
        diag.max_violation = self._violation(z0, best, bs, pre_rows)
        return best, best_y, diag

    # -- closed loop ---------------------------------------------------------

    def act(self, state: ControllerState):
        """Solve at the current step and return ``(u_t, v_t, diagnostics)``; stores the plan."""
        v_plan, duals, diag = self.solve(state)
        v0 = v_plan[:self.m].copy()
        u = self.gains.K @ (state.x_hat - state.z) + v0
        state.plan = v_plan
        state.plan_z0 = np.asarray(state.z, dtype=float).copy()
        state.duals = duals
        return u, v0, diag

    def observe(self, state: ControllerState, u, v, y_next) -> ControllerState:
        return observer_update(state, u, y_next, self.gains.L, self.A, self.B, self.C, v)

    def control_step(self, state: ControllerState, y_t=None, first: bool = False):
        """One closed-loop step: fold in ``y_t`` (if the previous input is pending), then act.

        Returns ``(u_t, new_state, diagnostics)``.
        """
        if state.last_u is not None and not first:
            state = self.observe(state, state.last_u, state.last_v, y_t)
        u, v, diag = self.act(state)
        state.last_u, state.last_v = u, v
        return u, state, diag


class PositionController:
    """Constant feed speed toward the goal as seen by the estimate (no PRS, no nominal state)."""

    name = "position"

    def __init__(self, A, B, C, L, speed):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.speed = np.abs(np.asarray(speed, dtype=float))
        self.schedule = None
        self.terminal = None

    def initial_state(self, mu0) -> ControllerState:
        return ControllerState.initial(mu0)

    def act(self, state: ControllerState):
        u = np.clip(-state.x_hat, -self.speed, self.speed)
        return u, None, MPCDiagnostics()

    def observe(self, state: ControllerState, u, v, y_next) -> ControllerState:
        return observer_update(state, u, y_next, self.L, self.A, self.B, self.C, None)


def solve_mpc(state: ControllerState, schedule: PRSSchedule, gains: Gains, constraints, H: int,
              A=None, B=None, C=None, terminal: Optional[TerminalSet] = None):
    """One-shot solve of the tightened problem; returns ``(v_plan (H, m), diagnostics)``."""
    n = np.asarray(state.z).size
    m = gains.K.shape[0]
    A = np.eye(n) if A is None else A
    B = np.eye(n, m) if B is None else B
    C = np.eye(n) if C is None else C
    ctl = MPCController(A, B, C, gains, schedule, constraints, H, terminal)
    v, _, diag = ctl.solve(state)
    return v.reshape(H, m), diag


BASELINES = ("ours", "gaussian", "zero_mean_subgaussian", "robust", "position")


def baseline_controller(kind: str, A, B, C, gains: Gains, budgets, funnel_params, delta: float = 0.01,
                        horizon: int = 15, measure_every: int = 1, n_c: Optional[int] = None,
                        robust_k: float = 3.0, initial_proxy: str = "exact",
                        max_generators: int = sets.DEFAULT_MAX_GENERATORS, position_speed=None):
    """Controller of the given kind for the funnel constraints.

    ``ours``, ``zero_mean_subgaussian``, ``gaussian`` and ``robust`` share
    the tightened MPC and differ only in how the PRS schedule is formed;
    ``position`` steps toward the estimated goal at a fixed per-axis
    speed (default: the input bound). Raises :class:`InfeasibleError`
    when the tightened problem admits no terminal set or input range.
    """
    from .uncertainty import build_prs_schedule, measurement_systems

    if kind not in BASELINES:
        raise ValueError(f"unknown controller kind {kind!r}")
    if kind == "position":
        speed = funnel_params.u_bar if position_speed is None else position_speed
        return PositionController(A, B, C, gains.L, speed)
    systems = measurement_systems(A, B, C, gains.K, gains.L, measure_every)
    schedule = build_prs_schedule(systems, budgets, delta, n_c, method=kind, robust_k=robust_k,
                                  initial_proxy_mode=initial_proxy, max_generators=max_generators)
    return MPCController(A, B, C, gains, schedule, FunnelConstraints(funnel_params), horizon, name=kind)
