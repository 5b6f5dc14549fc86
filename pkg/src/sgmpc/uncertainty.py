"""Closed-loop error system and propagation of its uncertainty.

The joint error ``e = [x_hat - x; x - z]`` of the observer/nominal-state
loop evolves as

    e+ = Ae e + Be1 w + Be2 m+ + Be3 eps+

The stochastic part is tracked by a variance proxy (propagated like a
covariance), the bounded part by a zonotope recursion. Both are mapped to
the stacked deviation ``xi = [x - z; u - v] = Ke e`` and combined into a
probabilistic reachable set per time step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from . import sets
from .sets import Ellipsoid, SetExpr, Zonotope

PSD_TOL = 1e-12
STEADY_TOL = 1e-9
METHODS = ("ours", "zero_mean_subgaussian", "gaussian", "robust")


class StabilityError(ValueError):
    """Raised when an error system is not Schur stable."""

    def __init__(self, radius: float):
        super().__init__(f"error system is not Schur stable (spectral radius {radius:.6g} >= 1)")
        self.radius = radius


def spectral_radius(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def symmetrize(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return 0.5 * (S + S.T)


def _check_psd(S, name: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square")
    scale = max(1.0, float(np.abs(S).max(initial=0.0)))
    if np.abs(S - S.T).max(initial=0.0) > PSD_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(symmetrize(S)).min(initial=0.0) < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semidefinite")
    return symmetrize(S)


@dataclass(frozen=True, eq=False)
class NoiseBudget:
    """Bounds and proxies describing the disturbance and measurement noise.

    W bounds the process disturbance, M the measurement bias; Sigma_eps is
    the variance proxy of the zero-mean measurement noise, and the initial
    state is sub-Gaussian around ``mu0`` with proxy ``sigma0**2 I``.
    """

    W: Zonotope
    M: Zonotope
    Sigma_eps: np.ndarray
    sigma0: float = 0.0
    mu0: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.W.dim
        if self.M.dim != n:
            raise sets.DimensionError("W and M dimensions differ")
        object.__setattr__(self, "Sigma_eps", _check_psd(self.Sigma_eps, "Sigma_eps"))
        if self.Sigma_eps.shape != (n, n):
            raise sets.DimensionError("Sigma_eps has the wrong size")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        mu0 = np.zeros(n) if self.mu0 is None else np.asarray(self.mu0, dtype=float).reshape(n)
        object.__setattr__(self, "mu0", mu0)
        for name, Z in (("W", self.W), ("M", self.M)):
            lo, hi = Z.interval_hull()
            if np.any(lo > 1e-15) or np.any(hi < -1e-15):
                raise ValueError(f"{name} must contain the origin")
            if Z.n_generators and not sets.contains(Z, np.zeros(n), tol=1e-9):
                raise ValueError(f"{name} must contain the origin")

    @property
    def dim(self) -> int:
        return self.W.dim

    @classmethod
    def zero(cls, n: int, mu0=None) -> "NoiseBudget":
        return cls(Zonotope.zero(n), Zonotope.zero(n), np.zeros((n, n)), 0.0, mu0)

    def to_dict(self) -> dict:
        return {
            "W": sets.to_dict(self.W),
            "M": sets.to_dict(self.M),
            "Sigma_eps": self.Sigma_eps.tolist(),
            "sigma0": float(self.sigma0),
            "mu0": self.mu0.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseBudget":
        unknown = set(d) - {"W", "M", "Sigma_eps", "sigma0", "mu0"}
        if unknown:
            raise ValueError(f"unknown noise budget fields: {sorted(unknown)}")

        def zono(x):
            z = sets.from_dict(x)
            if not isinstance(z, Zonotope):
                raise ValueError("W and M must be zonotopes")
            return z

        return cls(zono(d["W"]), zono(d["M"]), np.asarray(d["Sigma_eps"], dtype=float),
                   float(d.get("sigma0", 0.0)), d.get("mu0"))


@dataclass(frozen=True, eq=False)
class ErrorSystem:
    Ae: np.ndarray
    Be1: np.ndarray
    Be2: np.ndarray
    Be3: np.ndarray
    Ke: np.ndarray
    spectral_radius: float
    n: int
    m: int

    @property
    def error_dim(self) -> int:
        return 2 * self.n

    @property
    def xi_dim(self) -> int:
        return self.n + self.m


def assemble_error_system(A, B, C, K, L, convention: str = "derived",
                          require_stable: bool = True) -> ErrorSystem:
    """Block matrices of the joint estimation/tracking error dynamics.

    With ``e = [x_hat - x; x - z]``, ``u = K (x_hat - z) + v`` and the
    observer ``x_hat+ = A x_hat + B u + L (y+ - C (A x_hat + B u))``::

        Ae  = [[(I - L C) A, 0], [B K, A + B K]]
        Be1 = [[-(I - L C)], [I]]
        Be2 = Be3 = [[L], [0]]
        Ke  = [[0, I], [K, K]]

    ``convention="literal"`` instead returns the literal block pattern
    ``[[I - L C, 0], [-K, I + K]]``, ``Be1 = [[I - L C], [I]]``,
    ``Be2 = Be3 = [[-L], [0]]`` with the same ``Ke`` (meaningful for
    ``A = B = C = I`` only).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n, m = B.shape
    p = C.shape[0]
    if A.shape != (n, n) or C.shape[1] != n or K.shape != (m, n) or L.shape != (n, p):
        raise sets.DimensionError(
            f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape} K{K.shape} L{L.shape}")
    I = np.eye(n)
    Z = np.zeros((n, n))
    Ke = np.block([[Z, I], [K, K]])
    if convention == "derived":
        ILC = I - L @ C
        Ae = np.block([[ILC @ A, Z], [B @ K, A + B @ K]])
        Be1 = np.vstack([-ILC, I])
        Be2 = np.vstack([L, np.zeros((n, p))])
    elif convention == "literal":
        if m != n:
            raise ValueError("the literal block pattern needs a square input matrix")
        ILC = I - L @ C
        Ae = np.block([[ILC, Z], [-K, I + K]])
        Be1 = np.vstack([ILC, I])
        Be2 = np.vstack([-L, np.zeros((n, p))])
    else:
        raise ValueError(f"unknown convention {convention!r}")
    rho = spectral_radius(Ae)
    if require_stable and rho >= 1.0:
        raise StabilityError(rho)
    return ErrorSystem(Ae, Be1, Be2, Be2.copy(), Ke, rho, n, m)


def periodic_spectral_radius(systems: Sequence[ErrorSystem]) -> float:
    """Spectral radius of the one-period transition matrix."""
    M = np.eye(systems[0].error_dim)
    for es in systems:
        M = es.Ae @ M
    return spectral_radius(M)


def measurement_systems(A, B, C, K, L, every: int = 1, convention: str = "derived") -> list[ErrorSystem]:
    """Error systems for one period of a measurement arriving every ``every`` steps.

    Entry ``t % every`` governs the step ``t -> t+1``; only the step ending
    on a measurement uses the observer gain.
    """
    if every < 1:
        raise ValueError("measurement interval must be at least 1")
    with_meas = assemble_error_system(A, B, C, K, L, convention, require_stable=every == 1)
    if every == 1:
        return [with_meas]
    L0 = np.zeros_like(np.atleast_2d(np.asarray(L, dtype=float)))
    blind = assemble_error_system(A, B, C, K, L0, convention, require_stable=False)
    systems = [blind] * (every - 1) + [with_meas]
    rho = periodic_spectral_radius(systems)
    if rho >= 1.0:
        raise StabilityError(rho)
    return systems


def propagate_variance_proxy(es: ErrorSystem, Sigma_t, Sigma_eps) -> np.ndarray:
    """``Sigma+ = Ae Sigma Ae^T + Be3 Sigma_eps Be3^T``, symmetrised."""
    Sigma_t = np.asarray(Sigma_t, dtype=float)
    Sigma_eps = np.asarray(Sigma_eps, dtype=float)
    if Sigma_t.shape != (es.error_dim, es.error_dim):
        raise sets.DimensionError("variance proxy has the wrong size")
    nxt = es.Ae @ Sigma_t @ es.Ae.T + es.Be3 @ Sigma_eps @ es.Be3.T
    return symmetrize(nxt)


def propagate_bias_set(es: ErrorSystem, F_t: Zonotope, W: Zonotope, M: Zonotope,
                       max_generators: int = sets.DEFAULT_MAX_GENERATORS) -> Zonotope:
    """``F+ = Ae F (+) Be1 W (+) Be2 M``, then generator reduction (outer)."""
    if F_t.dim != es.error_dim:
        raise sets.DimensionError("bias set lives in the wrong space")
    nxt = sets.minkowski_sum(sets.affine_map(F_t, es.Ae),
                             sets.minkowski_sum(sets.affine_map(W, es.Be1), sets.affine_map(M, es.Be2)))
    nxt = sets.prune_zero_generators(nxt)
    return sets.reduce_generators(nxt, max_generators)


def transition_bound(systems: Sequence[ErrorSystem], tol: float = 1e-16, max_steps: int = 100_000) -> float:
    """``sup ||Ae_{s+k-1} ... Ae_s||_inf`` over start phases ``s`` and lengths ``k >= 0``."""
    period = len(systems)
    best = 1.0
    for s in range(period):
        M = np.eye(systems[0].error_dim)
        for k in range(max_steps):
            M = systems[(s + k) % period].Ae @ M
            nrm = float(np.abs(M).sum(axis=1).max())
            best = max(best, nrm)
            if nrm < tol * best:
                break
        else:
            raise StabilityError(periodic_spectral_radius(systems))
    return best


class BiasSetTracker:
    """Exact bias-set recursion with a certified bound for negligible generators.

    Generators are kept as they are propagated. Once a generator's largest
    entry falls below ``drop_tol`` times the set scale, it is removed and
    ``C * ||g||_inf`` is added to a fixed box, where ``C`` bounds every
    transition product in the infinity norm; that box therefore covers
    the generator's contribution at all later times. The tracked set is an
    outer approximation of the exact one and, for a stable loop with
    eventually constant budgets, converges.
    """

    def __init__(self, systems: Sequence[ErrorSystem], F0: Zonotope, drop_tol: float = 1e-14):
        self.systems = list(systems)
        self.C = transition_bound(self.systems)
        self.center = F0.center.copy()
        self.G = F0.generators.copy()
        self.dust = np.zeros(F0.dim)
        self.drop_tol = drop_tol
        self.scale = float(np.abs(self.G).max(initial=0.0))

    def step(self, t: int, W: Zonotope, M: Zonotope) -> None:
        es = self.systems[t % len(self.systems)]
        self.center = es.Ae @ self.center + es.Be1 @ W.center + es.Be2 @ M.center
        new = np.hstack([es.Be1 @ W.generators, es.Be2 @ M.generators])
        self.scale = max(self.scale, float(np.abs(new).max(initial=0.0)))
        G = np.hstack([es.Ae @ self.G, new])
        size = np.abs(G).max(axis=0) if G.shape[1] else np.zeros(0)
        tiny = size <= self.drop_tol * self.scale
        if np.any(tiny):
            self.dust = self.dust + self.C * float(size[tiny].sum())
        self.G = G[:, ~tiny]

    def zonotope(self, max_generators: int = sets.DEFAULT_MAX_GENERATORS) -> Zonotope:
        dust = np.diag(self.dust)[:, self.dust > 0]
        z = Zonotope(self.center, np.hstack([self.G, dust]))
        return sets.reduce_generators(z, max_generators)


def kappa(x: float) -> float:
    """``exp(x) / (1 + x)``, strictly increasing on ``x >= 0``."""
    if x < 0:
        raise ValueError("kappa is defined for x >= 0")
    return math.exp(x) / (1.0 + x)


def kappa_inv(y: float, tol: float = 1e-12) -> float:
    """Unique ``x >= 0`` with ``kappa(x) = y``, by bracketing bisection."""
    if not y >= 1.0:
        raise ValueError(f"kappa_inv needs y >= 1, got {y}")
    if y == 1.0:
        return 0.0
    log_y = math.log(y)

    def g(x):
        # log(kappa(x)) - log(y), stable for large x
        return x - math.log1p(x) - log_y

    lo, hi = 0.0, 1.0
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
        if mid in (lo, hi) and hi - lo <= 4 * np.spacing(hi):
            break
    return 0.5 * (lo + hi)


def subgaussian_radius(delta: float, n_c: int) -> float:
    """Radius ``sqrt(n_c (1 + kappa_inv(delta^(-2/n_c))))`` of the confidence ellipsoid."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if n_c < 1:
        raise ValueError("n_c must be positive")
    return math.sqrt(n_c * (1.0 + kappa_inv(delta ** (-2.0 / n_c))))


def chi2_quantile(p: float, dof: int, tol: float = 1e-10) -> float:
    """Inverse chi-square CDF by bisection on the regularised lower incomplete gamma."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    a = 0.5 * dof
    lo, hi = 0.0, max(1.0, float(dof))
    while special.gammainc(a, 0.5 * hi) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if special.gammainc(a, 0.5 * mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_radius(delta: float, n_c: int) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(chi2_quantile(1.0 - delta, n_c))


def confidence_ellipsoid(Sigma_t, Ke, delta: float, n_c: int) -> Ellipsoid:
    """Sub-Gaussian confidence ellipsoid of ``Ke e^s`` at level ``1 - delta``."""
    Ke = np.atleast_2d(np.asarray(Ke, dtype=float))
    S = Ke @ np.asarray(Sigma_t, dtype=float) @ Ke.T
    return Ellipsoid.from_psd(S, scale=subgaussian_radius(delta, n_c))


def initial_proxy(n: int, sigma0: float, mode: str = "exact") -> np.ndarray:
    """Variance proxy of the initial joint error when ``x_hat_0 = z_0 = mu0``.

    In that case ``e_0 = [mu0 - x0; x0 - mu0]``, whose proxy is
    ``sigma0^2 [[I, -I], [-I, I]]``. ``mode="isotropic"`` returns
    ``sigma0^2 I`` instead.
    """
    I = np.eye(n)
    if mode == "exact":
        return sigma0 ** 2 * np.block([[I, -I], [-I, I]])
    if mode == "isotropic":
        return sigma0 ** 2 * np.eye(2 * n)
    raise ValueError(f"unknown initial proxy mode {mode!r}")


class PRSEntry:
    """Confidence ellipsoid, bias zonotope and their sum for one time step."""

    __slots__ = ("E_xi", "F_xi", "E_total", "_cache")

    def __init__(self, E_xi: Optional[Ellipsoid], F_xi: Zonotope):
        self.E_xi = E_xi
        self.F_xi = F_xi
        self.E_total = SetExpr(E_xi, F_xi)
        self._cache: dict = {}

    def support(self, a) -> float:
        key = tuple(np.asarray(a, dtype=float).ravel())
        hit = self._cache.get(key)
        if hit is None:
            hit = sets.support(self.E_total, a)
            self._cache[key] = hit
        return hit

    def to_dict(self) -> dict:
        d = {"F_xi": sets.to_dict(self.F_xi)}
        if self.E_xi is not None:
            d["E_xi"] = sets.to_dict(self.E_xi)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PRSEntry":
        E = sets.from_dict(d["E_xi"]) if "E_xi" in d else None
        return cls(E, sets.from_dict(d["F_xi"]))


BudgetSpec = Union[NoiseBudget, Sequence[tuple[int, NoiseBudget]]]


def _budget_lookup(budgets: BudgetSpec):
    if isinstance(budgets, NoiseBudget):
        return (lambda t: budgets), 0, [budgets]
    pieces = sorted(budgets, key=lambda sb: sb[0])
    if not pieces or pieces[0][0] != 0:
        raise ValueError("piecewise budget must start at step 0")
    starts = [s for s, _ in pieces]

    def at(t):
        i = int(np.searchsorted(starts, t, side="right")) - 1
        return pieces[i][1]

    return at, starts[-1], [b for _, b in pieces]


@dataclass
class PRSSchedule:
    """Per-step PRS entries plus a (possibly periodic) steady-state tail."""

    entries: list
    period: int = 1
    converged: bool = True
    method: str = "ours"
    delta: float = 0.01
    n_c: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def index(self, t: int) -> int:
        """Entry index used at step ``t`` (periodic steady tail beyond the end)."""
        T = len(self.entries)
        if t < T:
            return t
        base = T - self.period
        return base + (t - base) % self.period

    def entry(self, t: int) -> PRSEntry:
        return self.entries[self.index(t)]

    def at(self, t: int) -> SetExpr:
        return self.entry(t).E_total

    def steady_entries(self) -> list:
        return self.entries[-self.period:]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "delta": self.delta,
            "n_c": self.n_c,
            "period": self.period,
            "converged": self.converged,
            "meta": self.meta,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PRSSchedule":
        return cls([PRSEntry.from_dict(e) for e in d["entries"]], d["period"], d["converged"],
                   d["method"], d["delta"], d["n_c"], d.get("meta", {}))


def _probe_directions(dim: int) -> np.ndarray:
    I = np.eye(dim)
    return np.vstack([I, -I])


def build_prs_schedule(systems, budgets: BudgetSpec, delta: float, n_c: Optional[int] = None,
                       T_max: int = 1000, method: str = "ours", robust_k: float = 3.0,
                       initial_proxy_mode: str = "exact",
                       max_generators: int = sets.DEFAULT_MAX_GENERATORS) -> PRSSchedule:
    """Run the proxy and bias-set recursions and assemble the PRS per step.

    ``systems`` is one :class:`ErrorSystem` or a periodic list of them
    (entry ``t % len`` drives step ``t -> t+1``). ``budgets`` is a single
    budget or ``[(start_step, budget), ...]``; the disturbance of step
    ``t`` and the measurement noise arriving at ``t+1`` are taken from the
    budgets active at those times.

    ``method`` selects how the deviation set is formed:

    - ``ours``: sub-Gaussian ellipsoid plus bias zonotope from W and M;
    - ``zero_mean_subgaussian``: as ``ours`` with M replaced by ``{0}``;
    - ``gaussian``: chi-square ellipsoid of the covariance recursion only;
    - ``robust``: zonotope recursion only, with the measurement noise
      replaced by the box ``robust_k * sqrt(diag(Sigma_eps))``.

    The recursion stops once the supports in the ``2 (n+m)`` coordinate
    directions repeat to within 1e-9 over one full period after the last
    budget switch; otherwise ``converged`` is False and the schedule is
    truncated at ``T_max`` entries.
    """
    if method not in METHODS:
        raise ValueError(f"unknown PRS method {method!r}")
    systems = [systems] if isinstance(systems, ErrorSystem) else list(systems)
    period = len(systems)
    if period > 1 and periodic_spectral_radius(systems) >= 1.0:
        raise StabilityError(periodic_spectral_radius(systems))
    if period == 1 and systems[0].spectral_radius >= 1.0:
        raise StabilityError(systems[0].spectral_radius)
    es0 = systems[0]
    n, dim_e, dim_xi = es0.n, es0.error_dim, es0.xi_dim
    if n_c is None:
        n_c = dim_xi
    budget_at, last_switch, all_budgets = _budget_lookup(budgets)
    b0 = budget_at(0)
    if b0.dim != n:
        raise sets.DimensionError("budget dimension does not match the system")

    if method == "gaussian":
        scale = gaussian_radius(delta, n_c)
    elif method == "robust":
        scale = 0.0
    else:
        scale = subgaussian_radius(delta, n_c)

    Sigma = initial_proxy(n, b0.sigma0, initial_proxy_mode)
    if method == "robust":
        x0_box = Zonotope.symmetric_box(np.full(n, robust_k * b0.sigma0))
        F = sets.prune_zero_generators(sets.affine_map(x0_box, np.vstack([-np.eye(n), np.eye(n)])))
    else:
        F = Zonotope.zero(dim_e)
    tracker = BiasSetTracker(systems, F)
    probes = _probe_directions(dim_xi)

    def make_entry(Sigma, F):
        Fxi = sets.affine_map(F, es0.Ke)
        if method == "robust":
            return PRSEntry(None, Fxi)
        E = Ellipsoid.from_psd(es0.Ke @ Sigma @ es0.Ke.T, scale=scale)
        return PRSEntry(E, Fxi)

    entries = [make_entry(Sigma, F)]
    hist = [np.atleast_1d(sets.support(entries[0].E_total, probes))]
    converged = False
    for t in range(T_max - 1):
        es = systems[t % period]
        bw, bm = budget_at(t), budget_at(t + 1)
        M = Zonotope.zero(n) if method in ("zero_mean_subgaussian", "gaussian") else bm.M
        W = Zonotope.zero(n) if method == "gaussian" else bw.W
        if method == "robust":
            eps_box = Zonotope.symmetric_box(robust_k * np.sqrt(np.clip(np.diag(bm.Sigma_eps), 0, None)))
            M = sets.minkowski_sum(M, eps_box)
        else:
            Sigma = propagate_variance_proxy(es, Sigma, bm.Sigma_eps)
        tracker.step(t, W, M)
        entries.append(make_entry(Sigma, tracker.zonotope(max_generators)))
        hist.append(np.atleast_1d(sets.support(entries[-1].E_total, probes)))
        k = len(hist) - 1
        if k - period >= last_switch + period and k >= 2 * period:
            diffs = [np.max(np.abs(hist[k - j] - hist[k - j - period])) for j in range(period)]
            if max(diffs) < STEADY_TOL:
                converged = True
                break
    meta = {"initial_proxy": initial_proxy_mode, "robust_k": robust_k if method == "robust" else None,
            "budget_switch": last_switch}
    return PRSSchedule(entries, period, converged, method, delta, n_c, meta)
