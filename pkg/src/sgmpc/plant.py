"""Synthetic drilling plant: ``x+ = x + u + w`` with breathing and bounded
force disturbances, and a pose sensor ``y = x + m + eps`` with a
deterministic bias process and zero-mean sub-Gaussian noise.

Two noise regimes are modelled: steps before ``group_boundary`` and steps
from it on (drill outside / inside the bone). Every realised ``w`` and
``m`` is checked against the declared sets; ``w`` is clipped into ``W``
and the clip is logged when a configuration lets it escape.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import noise
from .sets import Zonotope
from .uncertainty import NoiseBudget

N_STATE = 5
BIAS_KINDS = ("constant", "sinusoid_in_M", "piecewise")
FORCE_KINDS = ("uniform_box", "truncated_gaussian", "rademacher_mixture")
WAVEFORM_HEADER = ("time_s", "dx", "dy", "dz")
MEMBERSHIP_TOL = 1e-12


class WaveformError(ValueError):
    pass


def _vec(x, n: int = N_STATE) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.size == 1 and n > 1:
        v = np.full(n, float(v[0]))
    if v.size != n:
        raise ValueError(f"expected {n} entries, got {v.size}")
    return v


@dataclass
class BiasProcess:
    """Deterministic measurement bias for one regime, bounded by the box ``m_bound``."""

    kind: str = "constant"
    m_bound: np.ndarray = field(default_factory=lambda: np.zeros(N_STATE))
    value: Optional[np.ndarray] = None          # constant
    amplitude: Optional[np.ndarray] = None      # sinusoid_in_M
    period_steps: float = 40.0
    phase: float = 0.0
    values: Optional[Sequence] = None           # piecewise
    hold_steps: int = 20

    def __post_init__(self):
        if self.kind not in BIAS_KINDS:
            raise ValueError(f"unknown bias kind {self.kind!r}")
        self.m_bound = _vec(self.m_bound)
        if np.any(self.m_bound < 0):
            raise ValueError("bias bound must be nonnegative")
        if self.kind == "constant":
            self.value = self.m_bound.copy() if self.value is None else _vec(self.value)
            self._check(self.value)
        elif self.kind == "sinusoid_in_M":
            self.amplitude = self.m_bound.copy() if self.amplitude is None else _vec(self.amplitude)
            if np.any(np.abs(self.amplitude) > self.m_bound + MEMBERSHIP_TOL):
                raise ValueError("sinusoid amplitude leaves the bias set")
        else:
            if not self.values:
                raise ValueError("piecewise bias needs at least one value")
            self.values = [_vec(v) for v in self.values]
            for v in self.values:
                self._check(v)
            if self.hold_steps < 1:
                raise ValueError("hold_steps must be positive")

    def _check(self, v):
        if np.any(np.abs(v) > self.m_bound + MEMBERSHIP_TOL):
            raise ValueError("bias value lies outside the bias set")

    @property
    def M(self) -> Zonotope:
        return Zonotope.symmetric_box(self.m_bound)

    def __call__(self, t: int) -> np.ndarray:
        if self.kind == "constant":
            return self.value
        if self.kind == "sinusoid_in_M":
            return self.amplitude * math.sin(2 * math.pi * t / self.period_steps + self.phase)
        return self.values[(t // self.hold_steps) % len(self.values)]


@dataclass
class SensorRegime:
    bias: BiasProcess
    eps_kind: str = "truncated_gaussian"
    eps_scale: np.ndarray = field(default_factory=lambda: np.zeros(N_STATE))
    eps_k: float = 3.0

    def __post_init__(self):
        if self.eps_kind not in noise.NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.eps_kind!r}")
        self.eps_scale = _vec(self.eps_scale)

    @property
    def params(self) -> dict:
        return {"scale": self.eps_scale, "k": self.eps_k}

    @property
    def Sigma_eps(self) -> np.ndarray:
        return noise.certified_proxy(self.eps_kind, self.params)


@dataclass
class PlantConfig:
    """Plant, disturbance and sensor settings.

    ``breathing_amplitude`` is a 3-vector (metres) on the positions; a
    loaded ``breathing_waveform`` (``(T+1, 3)`` displacements on the step
    grid) takes precedence. ``force_bound`` is the per-axis bound of the
    random disturbance. ``w_bound`` overrides the derived disturbance box.
    """

    T: int = 200
    dt: float = 0.1
    breathing_amplitude: np.ndarray = field(default_factory=lambda: np.array([0.002, 0.0, 0.0]))
    breathing_period: float = 4.0
    breathing_phase: float = 0.0
    breathing_waveform: Optional[np.ndarray] = None
    force_kind: str = "uniform_box"
    force_bound: np.ndarray = field(default_factory=lambda: np.array([2e-4, 2e-4, 2e-4, 2e-3, 2e-3]))
    w_bound: Optional[np.ndarray] = None
    sensors: tuple = ()
    measure_every: int = 1
    mu0: np.ndarray = field(default_factory=lambda: np.array([-0.03, 0.004, -0.003, 0.05, 0.2]))
    sigma0: float = 5e-4
    init_kind: str = "truncated_gaussian"
    group_boundary: int = 140

    def __post_init__(self):
        if self.T < 1 or self.dt <= 0:
            raise ValueError("T and dt must be positive")
        if self.measure_every < 1:
            raise ValueError("measure_every must be at least 1")
        if self.force_kind not in FORCE_KINDS:
            raise ValueError(f"unknown force disturbance kind {self.force_kind!r}")
        if self.init_kind not in noise.NOISE_KINDS:
            raise ValueError(f"unknown initial-state kind {self.init_kind!r}")
        self.breathing_amplitude = _vec(self.breathing_amplitude, 3)
        self.force_bound = _vec(self.force_bound)
        self.mu0 = _vec(self.mu0)
        if self.w_bound is not None:
            self.w_bound = _vec(self.w_bound)
        if len(self.sensors) not in (1, 2):
            raise ValueError("configure one sensor regime, or two split at the group boundary")
        if self.breathing_waveform is not None:
            wf = np.asarray(self.breathing_waveform, dtype=float)
            if wf.shape != (self.T + 1, 3):
                raise ValueError("breathing waveform must hold T+1 rows of (dx, dy, dz)")
            self.breathing_waveform = wf

    # -- disturbance pieces ------------------------------------------------

    def breathing(self, t: int) -> np.ndarray:
        """Displacement (positions only) at step ``t``."""
        if self.breathing_waveform is not None:
            b = self.breathing_waveform[min(max(t, 0), self.T)]
        else:
            b = self.breathing_amplitude * math.sin(
                2 * math.pi * t * self.dt / self.breathing_period + self.breathing_phase)
        return np.concatenate([b, np.zeros(N_STATE - 3)])

    def breathing_step_bound(self) -> np.ndarray:
        """Per-axis bound on ``breathing(t) - breathing(t-1)``."""
        if self.breathing_waveform is not None:
            d = np.abs(np.diff(self.breathing_waveform, axis=0)).max(axis=0)
        else:
            d = 2 * np.abs(self.breathing_amplitude) * abs(math.sin(math.pi * self.dt / self.breathing_period))
        return np.concatenate([d, np.zeros(N_STATE - 3)])

    @property
    def force_params(self) -> dict:
        if self.force_kind == "truncated_gaussian":
            return {"scale": self.force_bound / 3.0, "k": 3.0}
        return {"scale": self.force_bound}

    @property
    def W_half(self) -> np.ndarray:
        if self.w_bound is not None:
            return self.w_bound
        return self.breathing_step_bound() + self.force_bound

    @property
    def W(self) -> Zonotope:
        return Zonotope.symmetric_box(self.W_half)

    def sensor(self, t: int) -> SensorRegime:
        return self.sensors[0] if len(self.sensors) == 1 or t < self.group_boundary else self.sensors[1]

    def true_budgets(self) -> list[tuple[int, NoiseBudget]]:
        """The correctly specified budget(s), split at the group boundary."""
        out = []
        starts = [0] if len(self.sensors) == 1 else [0, self.group_boundary]
        for start, reg in zip(starts, self.sensors):
            out.append((start, NoiseBudget(self.W, reg.bias.M, reg.Sigma_eps, self.sigma0, self.mu0)))
        return out


@dataclass
class PlantLog:
    clip_events: list = field(default_factory=list)


def initial_state(cfg: PlantConfig, rng: np.random.Generator) -> np.ndarray:
    return cfg.mu0 + noise.sample_noise(cfg.init_kind, {"scale": np.full(N_STATE, cfg.sigma0), "k": 3.0}, rng)


def plant_step(x_t, u_t, t: int, cfg: PlantConfig, rng: np.random.Generator,
               log: Optional[PlantLog] = None) -> tuple[np.ndarray, np.ndarray]:
    """``x_{t+1} = x_t + u_t + w_t``; returns ``(x_{t+1}, w_t)``.

    ``w_t`` is the breathing difference plus a bounded random draw,
    clipped into ``W`` (each clip is appended to ``log``).
    """
    w = cfg.breathing(t) - cfg.breathing(t - 1) + noise.sample_noise(cfg.force_kind, cfg.force_params, rng)
    half = cfg.W_half
    if np.any(np.abs(w) > half):
        if log is not None:
            log.clip_events.append({"t": int(t), "w": w.tolist()})
        w = np.clip(w, -half, half)
    return np.asarray(x_t, dtype=float) + np.asarray(u_t, dtype=float) + w, w


def sense(x_t, t: int, cfg: PlantConfig, rng: np.random.Generator) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """``y_t = x_t + m_t + eps_t`` on measurement steps (``t % measure_every == 0``).

    Returns ``(y_t, m_t)`` or ``(None, None)``. The noise draw is consumed
    only on measurement steps.
    """
    if t % cfg.measure_every:
        return None, None
    reg = cfg.sensor(t)
    m = reg.bias(t)
    if np.any(np.abs(m) > reg.bias.m_bound + MEMBERSHIP_TOL):
        raise AssertionError(f"bias left its set at step {t}")
    eps = noise.sample_noise(reg.eps_kind, reg.params, rng)
    return np.asarray(x_t, dtype=float) + m + eps, m


def load_waveform(path, dt: float, T: int, w_half: Optional[np.ndarray] = None) -> np.ndarray:
    """Read ``time_s,dx,dy,dz`` and resample onto ``t * dt`` for ``t = 0..T``.

    Linear interpolation; the file must cover the grid. When ``w_half``
    is given, per-step differences must stay within its position part.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != WAVEFORM_HEADER:
                raise WaveformError(f"{path}: header must be {','.join(WAVEFORM_HEADER)}")
            rows = [[float(v) for v in row] for row in reader if row]
    except ValueError as exc:
        if isinstance(exc, WaveformError):
            raise
        raise WaveformError(f"{path}: malformed numeric data ({exc})") from exc
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != 4 or data.shape[0] < 2:
        raise WaveformError(f"{path}: need at least two rows of four columns")
    time = data[:, 0]
    if np.any(np.diff(time) <= 0):
        raise WaveformError(f"{path}: time column must be strictly increasing")
    grid = np.arange(T + 1) * dt
    if grid[0] < time[0] - 1e-12 or grid[-1] > time[-1] + 1e-12:
        raise WaveformError(f"{path}: waveform covers [{time[0]}, {time[-1]}] s, horizon needs [0, {grid[-1]}] s")
    wf = np.column_stack([np.interp(grid, time, data[:, j]) for j in (1, 2, 3)])
    if w_half is not None:
        step = np.abs(np.diff(wf, axis=0)).max(axis=0)
        lim = np.asarray(w_half, dtype=float)[:3]
        if np.any(step > lim + 1e-15):
            raise WaveformError(f"{path}: per-step displacement {step.tolist()} exceeds the disturbance bound")
    return wf


def write_waveform(path, time, disp) -> None:
    """Write a waveform CSV in the format read by :func:`load_waveform`."""
    disp = np.asarray(disp, dtype=float)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WAVEFORM_HEADER)
        for ti, row in zip(np.asarray(time, dtype=float), disp):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in row])


@dataclass
class TrajectoryRecord:
    """Per-run log; arrays are ``(T+1, n)`` except ``w`` with ``T`` rows.

    ``u``, ``v`` at step ``T`` are computed but never applied. ``z``,
    ``v`` are ``None`` for controllers without a nominal trajectory.
    Missing measurements are NaN rows in ``y``.
    """

    controller: str
    index: int
    seed: int
    config_hash: str
    schedule_id: Optional[str]
    status: str
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    x_hat: np.ndarray
    z: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    feasible: Optional[np.ndarray] = None
    fallback: Optional[np.ndarray] = None
    sqp_iterations: Optional[np.ndarray] = None
    qp_iterations: Optional[np.ndarray] = None
    clip_events: list = field(default_factory=list)
    failure: Optional[str] = None

    ARRAYS = ("x", "y", "u", "x_hat", "z", "v", "w", "m")
    FLAGS = ("feasible", "fallback", "sqp_iterations", "qp_iterations")

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    def to_dict(self) -> dict:
        def arr(a):
            if a is None:
                return None
            a = np.asarray(a)
            if a.dtype.kind == "f":
                return [[None if math.isnan(v) else float(v) for v in row] if a.ndim == 2 else
                        (None if math.isnan(row) else float(row)) for row in a]
            return a.tolist()

        d = {"kind": "trajectory", "controller": self.controller, "index": self.index, "seed": self.seed,
             "config_hash": self.config_hash, "schedule_id": self.schedule_id, "status": self.status,
             "failure": self.failure, "clip_events": self.clip_events}
        for k in self.ARRAYS + self.FLAGS:
            d[k] = arr(getattr(self, k))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        def arr(v, dtype=float):
            if v is None:
                return None
            if dtype is float:
                return np.array([[math.nan if e is None else e for e in row] if isinstance(row, list) else
                                 (math.nan if row is None else row) for row in v], dtype=float)
            return np.asarray(v, dtype=dtype)

        kw = {k: arr(d.get(k)) for k in cls.ARRAYS}
        kw.update({"feasible": arr(d.get("feasible"), bool), "fallback": arr(d.get("fallback"), bool),
                   "sqp_iterations": arr(d.get("sqp_iterations"), int),
                   "qp_iterations": arr(d.get("qp_iterations"), int)})
        return cls(d["controller"], d["index"], d["seed"], d["config_hash"], d.get("schedule_id"), d["status"],
                   clip_events=d.get("clip_events", []), failure=d.get("failure"), **kw)
