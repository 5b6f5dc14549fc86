"""SVG figures: nominal and true trajectories with PRS outlines, and a precision bar chart.

Outlines are traced with support points, so they are exact for the
projected ellipsoid part and for the zonotope part alike. SVG output
is made reproducible by fixing matplotlib's hash salt and dropping the
date stamp.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from . import sets

OUTLINE_POINTS = 90
N_PRS_OUTLINES = 8


def _support_point(s, a: np.ndarray) -> np.ndarray:
    ell, zono = sets._parts(s)
    p = np.zeros(s.dim)
    if ell is not None:
        g = ell.shape.T @ a
        nrm = np.linalg.norm(g)
        p = p + ell.center + (ell.shape @ g / nrm if nrm > 0 else 0.0)
    if zono is not None:
        p = p + zono.center + zono.generators @ np.sign(zono.generators.T @ a)
    return p


def set_outline(s, n: int = OUTLINE_POINTS) -> np.ndarray:
    """Boundary points of a planar set, one support point per direction on the circle."""
    if s.dim != 2:
        raise sets.DimensionError("outline needs a planar set; project first")
    ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.array([_support_point(s, np.array([np.cos(a), np.sin(a)])) for a in ang])


def ellipse_outline(ell: sets.Ellipsoid, n: int = OUTLINE_POINTS) -> np.ndarray:
    return set_outline(ell, n)


def projected_outline(s, coords=(0, 1), n: int = OUTLINE_POINTS) -> np.ndarray:
    P = np.zeros((2, s.dim))
    P[0, coords[0]] = P[1, coords[1]] = 1.0
    return set_outline(sets.affine_map(s, P), n)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "sgmpc"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def trajectory_svg(records, schedules: dict, path, coords=(0, 1), run_index: Optional[int] = None) -> Path:
    """First-run nominal and true trajectories per controller, PRS outlines around the nominal.

    ``schedules`` maps controller names to PRS schedules (or ``None``).
    Axes are in millimetres.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    names = []
    for r in records:
        if r.controller not in names:
            names.append(r.controller)
    colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, name in enumerate(names):
        runs = [r for r in records if r.controller == name and r.status == "ok"]
        if run_index is not None:
            runs = [r for r in runs if r.index == run_index]
        if not runs:
            continue
        r = min(runs, key=lambda r: r.index)
        col = colours[k % len(colours)]
        i, j = coords
        ax.plot(r.x[:, i] * 1e3, r.x[:, j] * 1e3, "-", color=col, lw=1.0, label=f"{name}: x")
        sched = schedules.get(name)
        if r.z is not None:
            ax.plot(r.z[:, i] * 1e3, r.z[:, j] * 1e3, "--", color=col, lw=1.0, label=f"{name}: z")
        if sched is not None and r.z is not None:
            ts = np.unique(np.linspace(0, r.z.shape[0] - 1, N_PRS_OUTLINES).astype(int))
            for t in ts:
                pts = projected_outline(sched.at(int(t)), coords) + r.z[t, [i, j]]
                pts = np.vstack([pts, pts[:1]]) * 1e3
                ax.plot(pts[:, 0], pts[:, 1], "-", color=col, lw=0.6, alpha=0.6)
    ax.set_xlabel(f"state {coords[0]} [mm]")
    ax.set_ylabel(f"state {coords[1]} [mm]")
    if names:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path


def precision_svg(reports, path) -> Path:
    """Mean absolute final position error per axis and angle error, with std error bars."""
    plt = _pyplot()
    fig, (ax_p, ax_a) = plt.subplots(1, 2, figsize=(8.0, 3.6), gridspec_kw={"width_ratios": [3, 1]})
    reps = [r for r in reports if r.precision]
    width = 0.8 / max(len(reps), 1)
    for k, rep in enumerate(reps):
        p = rep.precision
        xs = np.arange(3) + (k - (len(reps) - 1) / 2) * width
        ax_p.bar(xs, p["err_mm"], width, yerr=p["err_std_mm"], capsize=2, label=rep.method)
        ax_a.bar([(k - (len(reps) - 1) / 2) * width], [p["angle_deg"]], width, yerr=[p["angle_std_deg"]], capsize=2)
    ax_p.set_xticks(range(3), ["x", "y", "z"])
    ax_p.set_ylabel("position error [mm]")
    ax_a.set_xticks([0], ["angle"])
    ax_a.set_ylabel("angle error [deg]")
    if reps:
        ax_p.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path
