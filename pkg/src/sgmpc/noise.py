"""Sub-Gaussian noise samplers with certified variance proxies, and
estimation of noise budgets from simulated trajectories."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .sets import Zonotope
from .uncertainty import NoiseBudget

NOISE_KINDS = ("gaussian", "truncated_gaussian", "uniform_box", "rademacher_mixture")
PROBE_SCALES = (0.5, 1.0, 2.0)
MIN_SEGMENT_SAMPLES = 10


def _scale(params: dict) -> np.ndarray:
    return np.abs(np.asarray(params["scale"], dtype=float).reshape(-1))


def certified_proxy(kind: str, params: dict) -> np.ndarray:
    """Diagonal variance proxy that the sampler provably satisfies.

    - gaussian with std ``s``: ``s^2``
    - truncated_gaussian at ``k s``: ``s^2`` (symmetric truncation only
      lowers the moment generating function)
    - uniform_box on ``[-a, a]``: ``a^2 / 3``, since
      ``sinh(x)/x <= exp(x^2/6)``
    - rademacher_mixture ``+-a``: ``a^2``, since ``cosh(x) <= exp(x^2/2)``
    """
    s = _scale(params)
    if kind in ("gaussian", "truncated_gaussian"):
        return np.diag(s ** 2)
    if kind == "uniform_box":
        return np.diag(s ** 2 / 3.0)
    if kind == "rademacher_mixture":
        return np.diag(s ** 2)
    raise ValueError(f"unknown noise kind {kind!r}")


def noise_bound(kind: str, params: dict) -> Optional[np.ndarray]:
    """Per-axis almost-sure bound, or None for unbounded samplers."""
    s = _scale(params)
    if kind == "gaussian":
        return None
    if kind == "truncated_gaussian":
        return float(params.get("k", 3.0)) * s
    if kind in ("uniform_box", "rademacher_mixture"):
        return s
    raise ValueError(f"unknown noise kind {kind!r}")


def sample_noise(kind: str, params: dict, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw one vector (or ``size`` rows) of zero-mean noise.

    ``params["scale"]`` holds the per-axis standard deviation (Gaussian
    kinds) or half-width (bounded kinds); ``params["k"]`` is the truncation
    point of ``truncated_gaussian`` in standard deviations (default 3).
    """
    s = _scale(params)
    shape = s.shape if size is None else (size, s.size)
    if kind == "gaussian":
        return rng.standard_normal(shape) * s
    if kind == "truncated_gaussian":
        k = float(params.get("k", 3.0))
        lo = special.ndtr(-k)
        u = rng.uniform(lo, 1.0 - lo, shape)
        return special.ndtri(u) * s
    if kind == "uniform_box":
        return rng.uniform(-1.0, 1.0, shape) * s
    if kind == "rademacher_mixture":
        return rng.choice([-1.0, 1.0], size=shape) * s
    raise ValueError(f"unknown noise kind {kind!r}")


def mgf_certifies(residuals, s: float, scales: Sequence[float] = PROBE_SCALES,
                  directions=None, tol: float = 0.0) -> bool:
    """Empirical check ``mean(exp(l a.r)) <= exp(l^2 s / 2) (1 + tol)``.

    ``l`` runs over ``scales / sqrt(s)`` and ``a`` over ``directions``
    (default: plus/minus each coordinate axis).
    """
    R = np.asarray(residuals, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if s <= 0:
        return bool(np.all(R == 0))
    if directions is None:
        I = np.eye(R.shape[1])
        directions = np.vstack([I, -I])
    proj = R @ np.asarray(directions, dtype=float).T
    for c in scales:
        lam = c / math.sqrt(s)
        # log-mean-exp for numerical safety
        lme = special.logsumexp(lam * proj, axis=0) - math.log(R.shape[0])
        if np.any(lme > 0.5 * c * c + math.log1p(tol)):
            return False
    return True


def estimate_proxy(residuals, scales: Sequence[float] = PROBE_SCALES, tol: float = 0.0,
                   rel_tol: float = 1e-6) -> float:
    """Smallest scalar ``s`` passing :func:`mgf_certifies` on 1-D residuals (bisection)."""
    r = np.asarray(residuals, dtype=float).reshape(-1, 1)
    if np.all(r == 0):
        return 0.0
    hi = float(np.mean(r ** 2)) or float(np.max(r ** 2))
    while not mgf_certifies(r, hi, scales, tol=tol):
        hi *= 2.0
    lo = 0.0
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if mid > 0 and mgf_certifies(r, mid, scales, tol=tol):
            hi = mid
        else:
            lo = mid
    return hi


def _inflated_box(points: np.ndarray, n: int, inflation: float) -> Zonotope:
    """Box hull of the points and the origin, scaled about the origin."""
    if points.size == 0:
        return Zonotope.zero(n)
    lo = np.minimum(points.min(axis=0), 0.0) * inflation
    hi = np.maximum(points.max(axis=0), 0.0) * inflation
    return Zonotope.box(lo, hi)


def estimate_noise_budget(trajectories: Sequence[dict], group_boundaries: Sequence[int],
                          n_segments: int = 10, inflation: float = 1.1, tol: float = 0.0,
                          mu0=None, sigma0: Optional[float] = None) -> list[NoiseBudget]:
    """Estimate one :class:`NoiseBudget` per group of time steps.

    Each trajectory is a mapping with ``x`` (T+1, n) ground-truth states,
    ``y`` (T+1, n) measurements with NaN rows where nothing was measured,
    and ``u`` (T, n) inputs. ``group_boundaries`` lists the step indices
    ``[t_0, t_1, ..., t_G]`` delimiting the groups ``[t_j, t_{j+1})``.

    Within a group the steps are cut into ``n_segments`` consecutive
    segments. Per segment the measurement residual ``y - x`` gives a mean
    (collected into the bias box M) and centred residuals (certified
    per axis by the empirical MGF); the disturbance residuals
    ``x+ - x - u`` are collected into the box W. The group budget is the
    union of the segment boxes and the per-axis maximum of the segment
    proxies, each inflated by ``inflation``.
    """
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    xs = [np.asarray(tr["x"], dtype=float) for tr in trajectories]
    ys = [np.asarray(tr["y"], dtype=float) for tr in trajectories]
    us = [np.asarray(tr["u"], dtype=float) for tr in trajectories]
    n = xs[0].shape[1]
    x0 = np.array([x[0] for x in xs])
    if mu0 is None:
        mu0 = x0.mean(axis=0)
    if sigma0 is None:
        dev = (x0 - mu0).reshape(-1)
        sigma0 = math.sqrt(estimate_proxy(dev) * inflation) if dev.size >= MIN_SEGMENT_SAMPLES else 0.0

    budgets = []
    bounds = list(group_boundaries)
    for g0, g1 in zip(bounds[:-1], bounds[1:]):
        steps = np.arange(g0, g1)
        if steps.size < n_segments:
            raise ValueError(f"group [{g0}, {g1}) is shorter than {n_segments} segments")
        means, ws, proxies = [], [], []
        for seg in np.array_split(steps, n_segments):
            r = np.concatenate([y[seg] - x[seg] for x, y in zip(xs, ys)])
            r = r[~np.any(np.isnan(r), axis=1)]
            w = np.concatenate([x[seg[seg < len(u)] + 1] - x[seg[seg < len(u)]] - u[seg[seg < len(u)]]
                                for x, u in zip(xs, us)])
            if r.shape[0] < MIN_SEGMENT_SAMPLES:
                raise ValueError(f"segment starting at step {seg[0]} has only {r.shape[0]} measurement samples")
            mean = r.mean(axis=0)
            means.append(mean)
            ws.append(w)
            centred = r - mean
            proxies.append([estimate_proxy(centred[:, i], tol=tol) for i in range(n)])
        M = _inflated_box(np.array(means), n, inflation)
        W = _inflated_box(np.concatenate(ws) if ws else np.zeros((0, n)), n, inflation)
        Sigma = np.diag(np.max(np.array(proxies), axis=0) * inflation)
        budgets.append(NoiseBudget(W, M, Sigma, float(sigma0), mu0))
    return budgets
