"""Monte-Carlo experiment runner and metrics.

A batch builds every requested controller once (PRS schedule, terminal
set), then runs ``N`` closed-loop trajectories per controller. Trajectory
``i`` draws all of its randomness from ``SeedSequence(seed, spawn_key=(i,))``,
split into independent streams for the initial state, the disturbance and
the sensor, so every controller sees the same noise realisation.

``records.ndjson`` holds a meta line, one line per controller (schedule,
terminal set, budgets) and one line per trajectory; it is sufficient to
recompute every entry of ``metrics.csv``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import constraints as cons
from . import plant as plant_mod
from . import sets
from .config import ExperimentConfig, canonical_json
from .controller import (BASELINES, InfeasibleError, MPCController, PositionController, baseline_controller,
                         design_gains)
from .noise import estimate_noise_budget
from .uncertainty import NoiseBudget, PRSSchedule

N = plant_mod.N_STATE
ESTIMATION_SPAWN_OFFSET = 1_000_000
IOU_STREAM = 7


# ---------------------------------------------------------------------------
# set-up

def trajectory_streams(seed: int, index: int) -> tuple[np.random.Generator, ...]:
    """Initial-state, disturbance and sensor generators for one trajectory."""
    ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def _gains(cfg: ExperimentConfig, pcfg: plant_mod.PlantConfig, budgets):
    I = np.eye(N)
    g = cfg.gains
    if g.L == "kalman":
        b = budgets[0][1]
        Sw = _box_cov(b.W)
        return design_gains(I, I, np.diag(g.Q), np.diag(g.R), "kalman", I, Sw, b.Sigma_eps)
    return design_gains(I, I, np.diag(g.Q), np.diag(g.R), "table", table_L=float(g.L))


def _box_cov(Z: sets.Zonotope) -> np.ndarray:
    """Covariance of the uniform distribution on a box zonotope (used only to shape a Kalman gain)."""
    lo, hi = Z.interval_hull()
    return np.diag(((hi - lo) / 2) ** 2 / 3 + 1e-18)


def estimate_budgets(cfg: ExperimentConfig, pcfg: plant_mod.PlantConfig) -> list[tuple[int, NoiseBudget]]:
    """Simulate the plant under position control and estimate the budgets per noise group."""
    est = cfg.budget.estimate
    I = np.eye(N)
    speed = cfg.funnel.u_bar if cfg.position_speed is None else cfg.position_speed
    ctl = PositionController(I, I, I, float(cfg.gains.L) * I if cfg.gains.L != "kalman" else 0.99 * I, speed)
    trajs = []
    for k in range(est.n_trajectories):
        rec = run_trajectory(ctl, "position", pcfg, cfg.seed, ESTIMATION_SPAWN_OFFSET + k, "", None)
        trajs.append({"x": rec.x, "y": rec.y, "u": rec.u[:-1]})
    bounds = [0, pcfg.T + 1]
    if len(pcfg.sensors) == 2 and 0 < pcfg.group_boundary <= pcfg.T:
        bounds = [0, pcfg.group_boundary, pcfg.T + 1]
    budgets = estimate_noise_budget(trajs, bounds, est.n_segments, est.inflation, est.tol,
                                    mu0=pcfg.mu0)
    return list(zip(bounds[:-1], budgets))


def resolve_budgets(cfg: ExperimentConfig, pcfg: plant_mod.PlantConfig) -> list[tuple[int, NoiseBudget]]:
    src = cfg.budget.source
    if src == "plant":
        return pcfg.true_budgets()
    if src == "estimate":
        return estimate_budgets(cfg, pcfg)
    out = []
    for g in sorted(cfg.budget.given, key=lambda g: g.start):
        out.append((g.start, NoiseBudget(sets.Zonotope.symmetric_box(np.array(g.W)),
                                         sets.Zonotope.symmetric_box(np.array(g.M)),
                                         np.diag(g.Sigma_eps), g.sigma0, pcfg.mu0)))
    return out


@dataclass
class ControllerBundle:
    name: str
    controller: object = None
    failure: Optional[str] = None

    @property
    def feasible(self) -> bool:
        return self.controller is not None

    @property
    def schedule(self) -> Optional[PRSSchedule]:
        return getattr(self.controller, "schedule", None)

    @property
    def schedule_id(self) -> Optional[str]:
        s = self.schedule
        if s is None:
            return None
        import hashlib
        return f"{self.name}-{hashlib.sha256(canonical_json(s.to_dict()).encode()).hexdigest()[:12]}"

    def to_dict(self, budgets) -> dict:
        ctl = self.controller
        term = getattr(ctl, "terminal", None)
        return {"kind": "controller", "controller": self.name, "feasible": self.feasible, "failure": self.failure,
                "schedule_id": self.schedule_id,
                "schedule": None if self.schedule is None else self.schedule.to_dict(),
                "terminal": None if term is None else term.to_dict(),
                "budgets": [{"start": s, **b.to_dict()} for s, b in budgets]}


def build_controllers(cfg: ExperimentConfig, pcfg: plant_mod.PlantConfig, budgets,
                      kinds: Optional[Iterable[str]] = None) -> list[ControllerBundle]:
    I = np.eye(N)
    gains = _gains(cfg, pcfg, budgets)
    fp = cfg.funnel.params()
    out = []
    for kind in (kinds or cfg.controllers):
        try:
            ctl = baseline_controller(kind, I, I, I, gains, budgets, fp, cfg.delta, cfg.horizon,
                                      pcfg.measure_every, cfg.n_c, cfg.robust_k, cfg.initial_proxy,
                                      cfg.max_generators, cfg.position_speed)
            # x_hat_0 = mu0 in every run, so the step-0 problem is shared by the whole batch
            ctl.act(ctl.initial_state(pcfg.mu0))
            out.append(ControllerBundle(kind, ctl))
        except InfeasibleError as exc:
            out.append(ControllerBundle(kind, None, f"{exc.reason}: {exc.detail}"))
    return out


# ---------------------------------------------------------------------------
# closed loop

def run_trajectory(ctl, name: str, pcfg: plant_mod.PlantConfig, seed: int, index: int, config_hash: str,
                   schedule_id: Optional[str]) -> plant_mod.TrajectoryRecord:
    """One closed-loop run. The input at step ``T`` is computed (for the metrics) but not applied."""
    T = pcfg.T
    r_init, r_force, r_sense = trajectory_streams(seed, index)
    has_nominal = isinstance(ctl, MPCController)
    X = np.full((T + 1, N), np.nan)
    Y = np.full((T + 1, N), np.nan)
    U = np.full((T + 1, N), np.nan)
    XH = np.full((T + 1, N), np.nan)
    Z = np.full((T + 1, N), np.nan) if has_nominal else None
    V = np.full((T + 1, N), np.nan) if has_nominal else None
    Wr = np.full((T, N), np.nan)
    Mr = np.full((T + 1, N), np.nan)
    feas = np.zeros(T + 1, dtype=bool)
    fb = np.zeros(T + 1, dtype=bool)
    sqp = np.zeros(T + 1, dtype=int)
    qpi = np.zeros(T + 1, dtype=int)
    log = plant_mod.PlantLog()

    x = plant_mod.initial_state(pcfg, r_init)
    state = ctl.initial_state(pcfg.mu0)
    status, failure = "ok", None
    last = T
    try:
        for t in range(T + 1):
            X[t] = x
            y, m = plant_mod.sense(x, t, pcfg, r_sense)
            if y is not None:
                Y[t], Mr[t] = y, m
            if t > 0:
                state = ctl.observe(state, U[t - 1], None if V is None else V[t - 1], y)
            XH[t] = state.x_hat
            if Z is not None:
                Z[t] = state.z
            try:
                u, v, diag = ctl.act(state)
            except InfeasibleError as exc:
                status, failure, last = "infeasible", f"step {t}: {exc.reason}: {exc.detail}", t
                break
            U[t] = u
            if V is not None:
                V[t] = v
            feas[t], fb[t] = diag.feasible, diag.fallback
            sqp[t], qpi[t] = diag.sqp_iterations, diag.qp_iterations
            if t < T:
                x, w = plant_mod.plant_step(x, u, t, pcfg, r_force, log)
                Wr[t] = w
    except Exception as exc:  # recorded, the batch continues
        status, failure = "error", f"{type(exc).__name__}: {exc}"
    if status != "ok":
        keep = slice(0, last + 1)
        X, Y, U, XH, Mr = X[keep], Y[keep], U[keep], XH[keep], Mr[keep]
        Wr = Wr[:last]
        Z = None if Z is None else Z[keep]
        V = None if V is None else V[keep]
        feas, fb, sqp, qpi = feas[keep], fb[keep], sqp[keep], qpi[keep]
    return plant_mod.TrajectoryRecord(name, index, seed, config_hash, schedule_id, status, X, Y, U, XH, Z, V,
                                      Wr, Mr, feas, fb, sqp, qpi, log.clip_events, failure)


def _run_one(args):
    ctl, name, pcfg, seed, index, chash, sid = args
    return run_trajectory(ctl, name, pcfg, seed, index, chash, sid)


@dataclass
class BatchResult:
    config: ExperimentConfig
    budgets: list
    bundles: list
    records: list

    def records_for(self, name: str) -> list:
        return [r for r in self.records if r.controller == name]


def run_batch(cfg: ExperimentConfig, out_dir=None, base_dir: Optional[Path] = None,
              kinds: Optional[Iterable[str]] = None) -> BatchResult:
    """Run every controller of ``cfg`` (or ``kinds``) on ``cfg.n_trajectories`` trajectories.

    When ``out_dir`` is given, ``records.ndjson`` is written incrementally.
    """
    pcfg = cfg.plant_config(base_dir)
    budgets = resolve_budgets(cfg, pcfg)
    bundles = build_controllers(cfg, pcfg, budgets, kinds)
    chash = cfg.config_hash()
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "records.ndjson").open("w")
        fh.write(canonical_json(meta_line(cfg)) + "\n")
        for b in bundles:
            fh.write(canonical_json(b.to_dict(budgets)) + "\n")
    records = []
    try:
        for b in bundles:
            if not b.feasible:
                continue
            jobs = [(b.controller, b.name, pcfg, cfg.seed, i, chash, b.schedule_id)
                    for i in range(cfg.n_trajectories)]
            if cfg.workers > 1:
                with ProcessPoolExecutor(cfg.workers) as pool:
                    results = pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers)))
                    for rec in results:
                        records.append(rec)
                        if fh:
                            fh.write(canonical_json(rec.to_dict()) + "\n")
            else:
                for job in jobs:
                    rec = _run_one(job)
                    records.append(rec)
                    if fh:
                        fh.write(canonical_json(rec.to_dict()) + "\n")
                        fh.flush()
    finally:
        if fh:
            fh.close()
    return BatchResult(cfg, budgets, bundles, records)


def meta_line(cfg: ExperimentConfig) -> dict:
    return {"kind": "meta", "config_hash": cfg.config_hash(), "seed": cfg.seed, "delta": cfg.delta,
            "T": cfg.plant.T, "funnel": cfg.funnel.model_dump(mode="json"),
            "grading": cfg.grading.model_dump(mode="json"), "controllers": list(cfg.controllers)}


# ---------------------------------------------------------------------------
# metrics

CSV_COLUMNS = (
    "method", "feasible", "gr_a", "gr_b", "signed_distance_mean_mm", "signed_distance_std_mm",
    "break_ratio", "mcp_min", "mcp_max", "acp", "iou_mean", "iou_stderr",
    "gr_c", "gr_d", "gr_e", "n_runs", "n_completed", "feasibility_rate", "fallback_count",
    "containment_indeterminate", "err_x_mm", "err_x_std_mm", "err_y_mm", "err_y_std_mm",
    "err_z_mm", "err_z_std_mm", "angle_err_deg", "angle_err_std_deg", "clip_events",
)


@dataclass
class MetricsReport:
    method: str
    feasible: bool
    n_runs: int = 0
    n_completed: int = 0
    acp: Optional[float] = None
    mcp_min: Optional[float] = None
    mcp_max: Optional[float] = None
    containment_per_step: Optional[list] = None
    containment_indeterminate: Optional[int] = None
    break_ratio: Optional[float] = None
    signed_distance_mean_mm: Optional[float] = None
    signed_distance_std_mm: Optional[float] = None
    gr_histogram: dict = field(default_factory=dict)
    iou_mean: Optional[float] = None
    iou_stderr: Optional[float] = None
    feasibility_rate: Optional[float] = None
    fallback_count: int = 0
    clip_events: int = 0
    precision: dict = field(default_factory=dict)

    def gr_fraction(self, grade: str) -> Optional[float]:
        total = sum(self.gr_histogram.values())
        return self.gr_histogram.get(grade, 0) / total if total else None

    def row(self) -> dict:
        p = self.precision
        return {
            "method": self.method, "feasible": "Y" if self.feasible else "N",
            "gr_a": self.gr_fraction("A"), "gr_b": self.gr_fraction("B"),
            "signed_distance_mean_mm": self.signed_distance_mean_mm,
            "signed_distance_std_mm": self.signed_distance_std_mm, "break_ratio": self.break_ratio,
            "mcp_min": self.mcp_min, "mcp_max": self.mcp_max, "acp": self.acp,
            "iou_mean": self.iou_mean, "iou_stderr": self.iou_stderr,
            "gr_c": self.gr_fraction("C"), "gr_d": self.gr_fraction("D"), "gr_e": self.gr_fraction("E"),
            "n_runs": self.n_runs, "n_completed": self.n_completed, "feasibility_rate": self.feasibility_rate,
            "fallback_count": self.fallback_count, "containment_indeterminate": self.containment_indeterminate,
            "err_x_mm": p.get("err_mm", [None] * 3)[0], "err_x_std_mm": p.get("err_std_mm", [None] * 3)[0],
            "err_y_mm": p.get("err_mm", [None] * 3)[1], "err_y_std_mm": p.get("err_std_mm", [None] * 3)[1],
            "err_z_mm": p.get("err_mm", [None] * 3)[2], "err_z_std_mm": p.get("err_std_mm", [None] * 3)[2],
            "angle_err_deg": p.get("angle_deg"), "angle_err_std_deg": p.get("angle_std_deg"),
            "clip_events": self.clip_events,
        }


def containment(records, schedule: PRSSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Per-run, per-step indicator of ``[x - z; u - v]`` in the PRS entry (1, 0 or -1 indeterminate)."""
    T1 = records[0].x.shape[0]
    ind = np.zeros((len(records), T1), dtype=int)
    for t in range(T1):
        pts = np.array([np.concatenate([r.x[t] - r.z[t], r.u[t] - r.v[t]]) for r in records])
        ind[:, t] = sets.contains_many(schedule.at(t), pts)
    return ind, (ind == 1)


def final_pose_metrics(x_T, fp: cons.FunnelParams, radius: float, n_samples: int, seed: int, index: int):
    breach = cons.screw_breach(x_T, fp)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, IOU_STREAM)))
    d = cons.direction(x_T[3], x_T[4])
    iou, se = cons.cylinder_iou((x_T[:3], d), (np.zeros(3), np.array([1.0, 0.0, 0.0])), radius,
                                fp.screw_length, n_samples, rng)
    return breach, iou, se


def compute_metrics(records, schedule: Optional[PRSSchedule], fp: cons.FunnelParams, radius: float = 0.002,
                    iou_samples: int = 1_000_000, method: Optional[str] = None,
                    feasible: bool = True) -> MetricsReport:
    """Aggregate safety and precision metrics over completed runs.

    ``MCP_min`` / ``MCP_max`` are the smallest / largest per-step
    containment fraction; indeterminate membership counts as not
    contained and is reported separately. Containment is unavailable
    without a schedule or nominal trajectory.
    """
    records = sorted(records, key=lambda r: r.index)
    name = method or (records[0].controller if records else "")
    rep = MetricsReport(name, feasible, n_runs=len(records))
    done = [r for r in records if r.status == "ok"]
    rep.n_completed = len(done)
    if any(r.status == "infeasible" for r in records):
        rep.feasible = False
    if not records:
        return rep
    rep.fallback_count = int(sum(int(np.sum(r.fallback)) for r in records if r.fallback is not None))
    rep.clip_events = int(sum(len(r.clip_events) for r in records))
    rep.feasibility_rate = sum(1 for r in records if r.status == "ok" and
                               (r.feasible is None or bool(np.all(r.feasible)))) / len(records)
    if not done:
        return rep
    if schedule is not None and done[0].z is not None:
        raw, inside = containment(done, schedule)
        per_t = inside.mean(axis=0)
        rep.acp = float(inside.mean())
        rep.mcp_min = float(per_t.min())
        rep.mcp_max = float(per_t.max())
        rep.containment_per_step = per_t.tolist()
        rep.containment_indeterminate = int(np.sum(raw == -1))
    rep.break_ratio = float(np.mean([bool(np.any(r.x[:, 0] > 0)) for r in done]))
    breaches, ious, ses = [], [], []
    for r in done:
        b, iou, se = final_pose_metrics(r.x[-1], fp, radius, iou_samples, r.seed, r.index)
        breaches.append(b)
        ious.append(iou)
        ses.append(se)
    breaches = np.array(breaches)
    finite = breaches[np.isfinite(breaches)]
    if finite.size:
        rep.signed_distance_mean_mm = float(np.mean(finite) * 1e3)
        rep.signed_distance_std_mm = float(np.std(finite) * 1e3)
    hist = {g: 0 for g in cons.GR_GRADES}
    for b in breaches:
        hist[cons.gr_grade(b)] += 1
    rep.gr_histogram = hist
    rep.iou_mean = float(np.mean(ious))
    rep.iou_stderr = float(math.sqrt(np.var(ious) / len(ious) + np.mean(np.square(ses)) / len(ses)))
    XT = np.array([r.x[-1] for r in done])
    err = np.abs(XT[:, :3]) * 1e3
    ang = np.degrees(np.arccos(np.clip(np.cos(XT[:, 3]), -1.0, 1.0)))
    rep.precision = {"err_mm": err.mean(axis=0).tolist(), "err_std_mm": err.std(axis=0).tolist(),
                     "angle_deg": float(ang.mean()), "angle_std_deg": float(ang.std())}
    return rep


def reports_for_batch(result: BatchResult) -> list[MetricsReport]:
    cfg = result.config
    fp = cfg.funnel.params()
    out = []
    for b in result.bundles:
        if not b.feasible:
            out.append(MetricsReport(b.name, False))
            continue
        out.append(compute_metrics(result.records_for(b.name), b.schedule, fp, cfg.grading.cylinder_radius,
                                   cfg.grading.iou_samples, b.name))
    return out


def any_infeasible_at_start(reports) -> bool:
    return any(not r.feasible for r in reports)


# ---------------------------------------------------------------------------
# outputs

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        row = rep.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_outputs(result: BatchResult, reports, out_dir, plots: bool = True) -> dict:
    """Write ``metrics.csv``, ``config-resolved.json`` and the plots; returns the paths written.

    ``records.ndjson`` is written by :func:`run_batch` (rewritten here if absent).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    rec_path = out_dir / "records.ndjson"
    if not rec_path.exists():
        with rec_path.open("w") as fh:
            for line in records_lines(result):
                fh.write(line + "\n")
    paths["records"] = rec_path
    p = out_dir / "metrics.csv"
    p.write_text(metrics_csv(reports))
    paths["metrics"] = p
    p = out_dir / "config-resolved.json"
    resolved = {"config_hash": result.config.config_hash(), "config": result.config.resolved()}
    p.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    paths["config"] = p
    if plots:
        from .plots import precision_svg, trajectory_svg
        cfg = result.config
        if cfg.output.plot:
            p = out_dir / "plot.svg"
            trajectory_svg(result.records, {b.name: b.schedule for b in result.bundles}, p)
            paths["plot"] = p
        if cfg.output.precision_plot:
            p = out_dir / "precision.svg"
            precision_svg(reports, p)
            paths["precision"] = p
    return paths


def records_lines(result: BatchResult) -> list[str]:
    lines = [canonical_json(meta_line(result.config))]
    lines += [canonical_json(b.to_dict(result.budgets)) for b in result.bundles]
    lines += [canonical_json(r.to_dict()) for r in result.records]
    return lines


@dataclass
class LoadedRecords:
    meta: dict
    controllers: dict
    records: list

    def schedule(self, name: str) -> Optional[PRSSchedule]:
        c = self.controllers.get(name)
        if c is None or c.get("schedule") is None:
            return None
        return PRSSchedule.from_dict(c["schedule"])


def load_records(path) -> LoadedRecords:
    meta, ctls, recs = {}, {}, []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            kind = d.get("kind")
            if kind == "meta":
                meta = d
            elif kind == "controller":
                ctls[d["controller"]] = d
            elif kind == "trajectory":
                recs.append(plant_mod.TrajectoryRecord.from_dict(d))
            else:
                raise ValueError(f"unknown record kind {kind!r}")
    return LoadedRecords(meta, ctls, recs)


def metrics_from_records(path) -> list[MetricsReport]:
    """Recompute every report from a ``records.ndjson`` file alone."""
    data = load_records(path)
    f = data.meta["funnel"]
    fp = cons.FunnelParams(f["c_x"], f["c_y"], f["c_z"], f["c_1"], f["c_2"], f["screw_length"], tuple(f["u_bar"]))
    g = data.meta["grading"]
    out = []
    for name in data.meta["controllers"]:
        c = data.controllers.get(name, {})
        if not c.get("feasible", True):
            out.append(MetricsReport(name, False))
            continue
        recs = [r for r in data.records if r.controller == name]
        out.append(compute_metrics(recs, data.schedule(name), fp, g["cylinder_radius"], g["iou_samples"], name))
    return out
