"""Experiment configuration: a YAML document validated by pydantic models.

Unknown keys are rejected at every level. Lengths are metres, angles
radians, times seconds; five-vectors follow the state layout
``(p_x, p_y, p_z, theta, phi)``. The defaults reproduce the drilling
setup used throughout the package (table gains, funnel scales, input
bounds, ``delta = 0.01``, ``H = 15``, ``T = 200``, ``T1 = 140``).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import plant as plant_mod
from .constraints import FunnelParams

ControllerKind = Literal["ours", "zero_mean_subgaussian", "gaussian", "robust", "position"]
Vec5 = List[float]
Vec3 = List[float]
HASH_EXCLUDED = ("output_dir", "workers")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _len(v, n, name):
    if len(v) != n:
        raise ValueError(f"{name} needs {n} entries, got {len(v)}")
    return v


class LowLevelGains(_Model):
    """Joint-level gains, kept for provenance; the joint loop is not simulated."""

    k_u: float = 0.9
    k_p: float = 40.0
    k_d: float = 8.0


class GainsConfig(_Model):
    Q: Vec5 = [100.0, 100.0, 100.0, 10.0, 10.0]
    R: Vec5 = [0.1, 0.1, 0.1, 0.1, 0.1]
    L: Union[float, Literal["kalman"]] = 0.99
    low_level: LowLevelGains = LowLevelGains()

    @field_validator("Q", "R")
    @classmethod
    def _five(cls, v, info):
        return _len(v, 5, info.field_name)


class FunnelConfig(_Model):
    c_x: float = Field(0.01, gt=0)
    c_y: float = Field(0.2, gt=0)
    c_z: float = Field(0.2, gt=0)
    c_1: float = 0.1
    c_2: float = 0.0
    screw_length: float = Field(0.04, gt=0)
    u_bar: Vec5 = [0.01, 0.005, 0.005, 0.2, 0.2]

    @field_validator("u_bar")
    @classmethod
    def _five(cls, v):
        return _len(v, 5, "u_bar")

    def params(self) -> FunnelParams:
        return FunnelParams(self.c_x, self.c_y, self.c_z, self.c_1, self.c_2, self.screw_length, tuple(self.u_bar))


class BreathingConfig(_Model):
    amplitude: Vec3 = [0.002, 0.0, 0.0]
    period: float = Field(4.0, gt=0)
    phase: float = 0.0
    waveform: Optional[str] = None

    @field_validator("amplitude")
    @classmethod
    def _three(cls, v):
        return _len(v, 3, "amplitude")


class ForceConfig(_Model):
    kind: Literal["uniform_box", "truncated_gaussian", "rademacher_mixture"] = "uniform_box"
    bound: Vec5 = [2e-4, 2e-4, 2e-4, 2e-3, 2e-3]

    @field_validator("bound")
    @classmethod
    def _five(cls, v):
        return _len(v, 5, "bound")


class BiasConfig(_Model):
    kind: Literal["constant", "sinusoid_in_M", "piecewise"] = "constant"
    bound: Vec5 = [5e-4, 5e-4, 5e-4, 5e-3, 5e-3]
    value: Optional[Vec5] = None
    amplitude: Optional[Vec5] = None
    period_steps: float = Field(40.0, gt=0)
    phase: float = 0.0
    values: Optional[List[Vec5]] = None
    hold_steps: int = Field(20, ge=1)


class EpsConfig(_Model):
    kind: Literal["gaussian", "truncated_gaussian", "uniform_box", "rademacher_mixture"] = "truncated_gaussian"
    scale: Vec5 = [3e-4, 3e-4, 3e-4, 3e-3, 3e-3]
    k: float = Field(3.0, gt=0)


class SensorRegimeConfig(_Model):
    bias: BiasConfig = BiasConfig()
    eps: EpsConfig = EpsConfig()


def _inside_default() -> SensorRegimeConfig:
    return SensorRegimeConfig(
        bias=BiasConfig(bound=[3e-4, 3e-4, 3e-4, 3e-3, 3e-3]),
        eps=EpsConfig(scale=[2e-4, 2e-4, 2e-4, 2e-3, 2e-3]))


class SensorConfig(_Model):
    outside: SensorRegimeConfig = SensorRegimeConfig()
    inside: Optional[SensorRegimeConfig] = Field(default_factory=_inside_default)
    measure_every: int = Field(1, ge=1)


class InitialConfig(_Model):
    mu0: Vec5 = [-0.03, 0.004, -0.003, 0.05, 0.2]
    sigma0: float = Field(5e-4, ge=0)
    kind: Literal["gaussian", "truncated_gaussian", "uniform_box", "rademacher_mixture"] = "truncated_gaussian"


class PlantSection(_Model):
    T: int = Field(200, ge=1)
    dt: float = Field(0.1, gt=0)
    group_boundary: int = Field(140, ge=0)
    breathing: BreathingConfig = BreathingConfig()
    force: ForceConfig = ForceConfig()
    w_bound: Optional[Vec5] = None
    sensor: SensorConfig = SensorConfig()
    initial: InitialConfig = InitialConfig()


class GivenBudget(_Model):
    start: int = Field(0, ge=0)
    W: Vec5
    M: Vec5
    Sigma_eps: Vec5 = Field(description="diagonal of the measurement variance proxy")
    sigma0: float = Field(0.0, ge=0)


class EstimateConfig(_Model):
    n_trajectories: int = Field(20, ge=2)
    n_segments: int = Field(10, ge=1)
    inflation: float = Field(1.1, ge=1.0)
    tol: float = Field(0.0, ge=0)


class BudgetConfig(_Model):
    source: Literal["plant", "estimate", "given"] = "plant"
    estimate: EstimateConfig = EstimateConfig()
    given: Optional[List[GivenBudget]] = None

    @model_validator(mode="after")
    def _given_present(self):
        if self.source == "given" and not self.given:
            raise ValueError("budget.source 'given' needs a 'given' list")
        return self


class GradingConfig(_Model):
    cylinder_radius: float = Field(0.002, gt=0)
    iou_samples: int = Field(1_000_000, ge=1)


class OutputConfig(_Model):
    plot: bool = True
    precision_plot: bool = True


class ExperimentConfig(_Model):
    """Top-level experiment description."""

    seed: int = 0
    n_trajectories: int = Field(100, ge=1)
    output_dir: str = "out"
    controllers: List[ControllerKind] = ["ours"]
    delta: float = Field(0.01, gt=0, lt=1)
    horizon: int = Field(15, ge=1)
    n_c: Optional[int] = Field(None, ge=1)
    robust_k: float = Field(3.0, gt=0)
    initial_proxy: Literal["exact", "isotropic"] = "exact"
    max_generators: int = Field(60, ge=1)
    position_speed: Optional[Vec5] = None
    workers: int = Field(1, ge=1)
    gains: GainsConfig = GainsConfig()
    funnel: FunnelConfig = FunnelConfig()
    plant: PlantSection = PlantSection()
    budget: BudgetConfig = BudgetConfig()
    grading: GradingConfig = GradingConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("controllers")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one controller is required")
        if len(set(v)) != len(v):
            raise ValueError("controllers must be distinct")
        return v

    # -- derived objects -------------------------------------------------

    def config_hash(self) -> str:
        """Hash of every setting that can change results (not the output location or worker count)."""
        d = self.resolved()
        for k in HASH_EXCLUDED:
            d.pop(k)
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def plant_config(self, base_dir: Optional[Path] = None) -> plant_mod.PlantConfig:
        p = self.plant
        regimes = [p.sensor.outside] + ([p.sensor.inside] if p.sensor.inside is not None else [])
        sensors = tuple(
            plant_mod.SensorRegime(
                plant_mod.BiasProcess(r.bias.kind, np.array(r.bias.bound), r.bias.value, r.bias.amplitude,
                                      r.bias.period_steps, r.bias.phase, r.bias.values, r.bias.hold_steps),
                r.eps.kind, np.array(r.eps.scale), r.eps.k)
            for r in regimes)
        cfg = plant_mod.PlantConfig(
            T=p.T, dt=p.dt, breathing_amplitude=np.array(p.breathing.amplitude),
            breathing_period=p.breathing.period, breathing_phase=p.breathing.phase,
            force_kind=p.force.kind, force_bound=np.array(p.force.bound),
            w_bound=None if p.w_bound is None else np.array(p.w_bound), sensors=sensors,
            measure_every=p.sensor.measure_every, mu0=np.array(p.initial.mu0), sigma0=p.initial.sigma0,
            init_kind=p.initial.kind, group_boundary=p.group_boundary)
        if p.breathing.waveform is not None:
            path = Path(p.breathing.waveform)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            w_half = None if p.w_bound is None else np.array(p.w_bound)
            cfg.breathing_waveform = plant_mod.load_waveform(path, p.dt, p.T, w_half)
        return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with path.open() as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.model_validate(data)


def dump_default_config() -> str:
    return yaml.safe_dump(ExperimentConfig().resolved(), sort_keys=False)
