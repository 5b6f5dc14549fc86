"""Funnel-shaped safe set, robust tightening against a deviation set, and
clinical grading geometry.

State layout: ``x = [p_x, p_y, p_z, theta, phi]`` (metres, radians),
expressed relative to the target screw pose; the input has the same
layout. The drilling direction is
``d(theta, phi) = (cos theta, sin theta cos phi, sin theta sin phi)``,
so ``theta = 0`` points along the drilling axis.

Constraints are handled in their *robust* form ``G(x, v; S) <= 0``: an
upper bound on the nominal constraint ``g(x + xi)`` over every deviation
``xi`` in a set ``S``. ``S`` enters only through a short vector of
support values and radii (a "deviation summary"), which is additive over
Minkowski sums and positively homogeneous, so summaries of PRS entries
and terminal ellipsoids can be combined by plain addition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import sets

EXP_CLAMP = 700.0
BISECTION_TOL = 1e-9
NX = 5  # pose dimension


@dataclass(frozen=True)
class FunnelParams:
    c_x: float = 0.01
    c_y: float = 0.2
    c_z: float = 0.2
    c_1: float = 0.1
    c_2: float = 0.0
    screw_length: float = 0.04
    u_bar: tuple = (0.01, 0.005, 0.005, 0.2, 0.2)
    # operating box for linearisation points, per state coordinate
    box_lower: tuple = (-0.5, -0.5, -0.5, -math.pi / 2, -math.pi)
    box_upper: tuple = (0.1, 0.5, 0.5, math.pi / 2, math.pi)

    def __post_init__(self):
        if min(self.c_x, self.c_y, self.c_z) <= 0:
            raise ValueError("funnel scale factors must be positive")
        if self.screw_length <= 0:
            raise ValueError("screw length must be positive")
        if len(self.u_bar) != NX or min(self.u_bar) <= 0:
            raise ValueError("u_bar needs five positive entries")


def _exp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def direction(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([np.cos(theta), st * np.cos(phi), st * np.sin(phi)], axis=-1)


def lateral_radius(p, fp: FunnelParams):
    p = np.asarray(p, dtype=float)
    return np.sqrt((p[..., 1] / fp.c_y) ** 2 + (p[..., 2] / fp.c_z) ** 2)


def funnel_h(p, fp: FunnelParams):
    """``(rho(p) + c_1)^2 - exp(-p_x / c_x - c_2)``; nonpositive inside the funnel."""
    p = np.asarray(p, dtype=float)
    val = (lateral_radius(p, fp) + fp.c_1) ** 2 - _exp(-p[..., 0] / fp.c_x - fp.c_2)
    return float(val) if np.ndim(val) == 0 else val


def head_point(x, fp: FunnelParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., :3] + fp.screw_length * direction(x[..., 3], x[..., 4])


def tip_and_head_constraints(x, fp: FunnelParams) -> tuple[float, float, float]:
    """``(h(p), h(p + l(d)), p_x)``; all three must be nonpositive."""
    x = np.asarray(x, dtype=float)
    return funnel_h(x[:3], fp), funnel_h(head_point(x, fp), fp), float(x[0])


# ---------------------------------------------------------------------------
# deviation summaries and robust constraint values

# summary layout for the funnel constraint set
S_PX, S_TH_POS, S_TH_NEG, R_LAT, R_DIR = 0, 1, 2, 3, 4
S_U_POS = slice(5, 10)
S_U_NEG = slice(10, 15)
SUMMARY_SIZE = 15


def _project_radius(S, rows: np.ndarray) -> float:
    return sets.radius(sets.affine_map(S, rows))


class FunnelConstraints:
    """Tip funnel, head funnel and break-through constraints plus input bounds.

    Robust values for a deviation set S with summary ``b``:

    - tip: ``(rho(p) + b_lat + c_1)^2 - exp(-(p_x + b_px)/c_x - c_2)``
      where ``b_lat`` bounds ``rho`` of the position deviation and
      ``b_px`` is the support along ``p_x``;
    - head: the same at ``q = p + l(d)``, with the extra lateral and
      axial motion of ``l`` bounded through the angle deviation radius
      (``d`` is 1-Lipschitz in ``(theta, phi)``) and the exact range of
      ``cos`` over the ``theta`` interval;
    - break-through: ``p_x + b_px``;
    - inputs: ``+-v_i + support(S, +-e_{u_i}) - u_bar_i``.

    Each bound follows from the triangle inequality and monotonicity, so
    ``G(x, v; S) <= 0`` implies the nominal constraints for every point of
    ``[x; v] + S``.
    """

    names = ("tip", "head", "breakthrough") + tuple(f"u{i}+" for i in range(NX)) + tuple(
        f"u{i}-" for i in range(NX))
    n_state = 3

    def __init__(self, fp: FunnelParams, n: int = NX, m: int = NX):
        if n != NX or m != NX:
            raise ValueError("funnel constraints are defined for the 5-D pose and input")
        self.fp = fp
        self.n, self.m = n, m
        self.u_bar = np.asarray(fp.u_bar, dtype=float)
        self.cmin = min(fp.c_y, fp.c_z)
        self._lat_rows = np.zeros((2, n + m))
        self._lat_rows[0, 1] = 1.0 / fp.c_y
        self._lat_rows[1, 2] = 1.0 / fp.c_z
        self._dir_rows = np.zeros((2, n + m))
        self._dir_rows[0, 3] = 1.0
        self._dir_rows[1, 4] = 1.0

    @property
    def n_constraints(self) -> int:
        return len(self.names)

    def summary(self, S) -> np.ndarray:
        """Deviation summary of a set in the stacked (state, input) space."""
        if S is None:
            return np.zeros(SUMMARY_SIZE)
        dim = self.n + self.m
        I = np.eye(dim)
        b = np.zeros(SUMMARY_SIZE)
        dirs = np.vstack([I[0], I[3], -I[3], I[self.n:], -I[self.n:]])
        h = sets.support(S, dirs)
        b[S_PX] = h[0]
        b[S_TH_POS] = h[1]
        b[S_TH_NEG] = h[2]
        b[S_U_POS] = h[3:3 + self.m]
        b[S_U_NEG] = h[3 + self.m:]
        b[R_LAT] = _project_radius(S, self._lat_rows)
        b[R_DIR] = _project_radius(S, self._dir_rows)
        return b

    # -- robust values -----------------------------------------------------

    def _max_cos(self, theta, lo_shift, hi_shift):
        """Max of cos over [theta - lo_shift, theta + hi_shift] and its theta-derivative."""
        a = theta - lo_shift
        b = theta + hi_shift
        contains0 = (a <= 0) & (b >= 0)
        ca, cb = np.cos(a), np.cos(b)
        val = np.where(contains0, 1.0, np.maximum(ca, cb))
        dval = np.where(contains0, 0.0, np.where(ca >= cb, -np.sin(a), -np.sin(b)))
        return val, dval

    def values(self, x, v, b, grad: bool = False):
        """Robust constraint values (last axis) for stacked points.

        ``x`` (..., n), ``v`` (..., m), ``b`` (..., SUMMARY_SIZE). With
        ``grad=True`` also returns derivatives w.r.t. x and v with shapes
        (..., J, n) and (..., J, m).
        """
        fp = self.fp
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        b = np.asarray(b, dtype=float)
        px, py, pz, th, ph = (x[..., i] for i in range(5))
        s_px = b[..., S_PX]
        lat = b[..., R_LAT]
        ell = fp.screw_length
        dir_shift = ell * b[..., R_DIR]

        # tip
        rho = np.sqrt((py / fp.c_y) ** 2 + (pz / fp.c_z) ** 2)
        a_tip = rho + lat + fp.c_1
        e_tip = _exp(-(px + s_px) / fp.c_x - fp.c_2)
        g_tip = a_tip ** 2 - e_tip

        # head
        d = direction(th, ph)
        qy = py + ell * d[..., 1]
        qz = pz + ell * d[..., 2]
        rho_q = np.sqrt((qy / fp.c_y) ** 2 + (qz / fp.c_z) ** 2)
        a_head = rho_q + lat + dir_shift / self.cmin + fp.c_1
        mc, dmc = self._max_cos(th, b[..., S_TH_NEG], b[..., S_TH_POS])
        ax = px + s_px + ell * mc
        e_head = _exp(-ax / fp.c_x - fp.c_2)
        g_head = a_head ** 2 - e_head

        g_px = px + s_px
        g_up = v + b[..., S_U_POS] - self.u_bar
        g_un = -v + b[..., S_U_NEG] - self.u_bar
        G = np.concatenate([np.stack([g_tip, g_head, g_px], axis=-1), g_up, g_un], axis=-1)
        if not grad:
            return G

        shape = x.shape[:-1]
        J = self.n_constraints
        dGx = np.zeros(shape + (J, self.n))
        dGv = np.zeros(shape + (J, self.m))
        safe = np.where(rho > 0, rho, 1.0)
        dGx[..., 0, 0] = e_tip / fp.c_x
        dGx[..., 0, 1] = np.where(rho > 0, 2 * a_tip * py / fp.c_y ** 2 / safe, 0.0)
        dGx[..., 0, 2] = np.where(rho > 0, 2 * a_tip * pz / fp.c_z ** 2 / safe, 0.0)

        safe_q = np.where(rho_q > 0, rho_q, 1.0)
        dr_dqy = np.where(rho_q > 0, qy / fp.c_y ** 2 / safe_q, 0.0)
        dr_dqz = np.where(rho_q > 0, qz / fp.c_z ** 2 / safe_q, 0.0)
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(ph), np.sin(ph)
        dqy_dth, dqz_dth = ell * ct * cp, ell * ct * sp
        dqy_dph, dqz_dph = -ell * st * sp, ell * st * cp
        dGx[..., 1, 0] = e_head / fp.c_x
        dGx[..., 1, 1] = 2 * a_head * dr_dqy
        dGx[..., 1, 2] = 2 * a_head * dr_dqz
        dGx[..., 1, 3] = 2 * a_head * (dr_dqy * dqy_dth + dr_dqz * dqz_dth) + e_head / fp.c_x * ell * dmc
        dGx[..., 1, 4] = 2 * a_head * (dr_dqy * dqy_dph + dr_dqz * dqz_dph)

        dGx[..., 2, 0] = 1.0
        for i in range(self.m):
            dGv[..., 3 + i, i] = 1.0
            dGv[..., 3 + self.m + i, i] = -1.0
        return G, dGx, dGv

    def nominal(self, x, v):
        return self.values(x, v, np.zeros(SUMMARY_SIZE))


class HalfspaceConstraints:
    """Linear constraints ``a_j . [x; u] <= c_j`` over the stacked space.

    The summary of a set is its support along each ``a_j``, and the robust
    value is ``a_j . [x; v] + support_j - c_j``.
    """

    def __init__(self, normals, offsets, n: int, m: int, names=None):
        self.Aj = np.atleast_2d(np.asarray(normals, dtype=float))
        self.c = np.asarray(offsets, dtype=float).reshape(-1)
        self.n, self.m = n, m
        if self.Aj.shape != (self.c.size, n + m):
            raise sets.DimensionError("halfspace normals must have n + m columns")
        self.names = tuple(names) if names is not None else tuple(f"h{j}" for j in range(self.c.size))
        self.n_state = 0

    @classmethod
    def empty(cls, n: int, m: int) -> "HalfspaceConstraints":
        return cls(np.zeros((0, n + m)), np.zeros(0), n, m)

    @classmethod
    def input_box(cls, u_bar, n: int) -> "HalfspaceConstraints":
        u_bar = np.asarray(u_bar, dtype=float).reshape(-1)
        m = u_bar.size
        I = np.eye(m)
        normals = np.hstack([np.zeros((2 * m, n)), np.vstack([I, -I])])
        return cls(normals, np.concatenate([u_bar, u_bar]), n, m)

    def __add__(self, other: "HalfspaceConstraints") -> "HalfspaceConstraints":
        return HalfspaceConstraints(np.vstack([self.Aj, other.Aj]), np.concatenate([self.c, other.c]),
                                    self.n, self.m, self.names + other.names)

    @property
    def n_constraints(self) -> int:
        return self.c.size

    def summary(self, S) -> np.ndarray:
        if S is None or self.c.size == 0:
            return np.zeros(self.c.size)
        nz = np.any(self.Aj != 0, axis=1)
        out = np.zeros(self.c.size)
        if np.any(nz):
            out[nz] = np.atleast_1d(sets.support(S, self.Aj[nz]))
        return out

    def values(self, x, v, b, grad: bool = False):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        xv = np.concatenate([x, v], axis=-1)
        G = xv @ self.Aj.T + np.asarray(b, dtype=float) - self.c
        if not grad:
            return G
        shape = x.shape[:-1]
        dGx = np.broadcast_to(self.Aj[:, :self.n], shape + self.Aj[:, :self.n].shape).copy()
        dGv = np.broadcast_to(self.Aj[:, self.n:], shape + self.Aj[:, self.n:].shape).copy()
        return G, dGx, dGv

    def nominal(self, x, v):
        return self.values(x, v, np.zeros(self.c.size))


@dataclass
class TightenedConstraint:
    """``normal . [x; u] <= offset - margin`` (linearised at a reference)."""

    name: str
    normal: np.ndarray
    offset: float
    margin: float

    @property
    def tightened_offset(self) -> float:
        return self.offset - self.margin

    def satisfied(self, x, u, tol: float = 0.0) -> bool:
        return float(self.normal @ np.concatenate([x, u])) <= self.tightened_offset + tol


def in_operating_box(x, fp: FunnelParams) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(x >= np.asarray(fp.box_lower)) and np.all(x <= np.asarray(fp.box_upper)))


def linearize_and_tighten(x_ref, E, fp: FunnelParams, v_ref=None) -> list[TightenedConstraint]:
    """Linearised, tightened constraints around ``x_ref`` for the deviation set ``E``.

    For each robust constraint ``G`` the row is
    ``g(x_ref) + grad G(x_ref) . ([x; u] - [x_ref; v_ref]) + margin <= 0`` with
    ``margin = G(x_ref) - g(x_ref) >= 0``; for the break-through constraint
    this is exactly the support of ``E`` along ``p_x``, and for inputs the
    support along ``+-e_{u_i}``. ``E`` lives in the stacked (state, input)
    space; ``None`` means no deviation.
    """
    x_ref = np.asarray(x_ref, dtype=float)
    if not in_operating_box(x_ref, fp):
        raise ValueError("linearisation point lies outside the operating box")
    cons = FunnelConstraints(fp)
    v_ref = np.zeros(cons.m) if v_ref is None else np.asarray(v_ref, dtype=float)
    b = cons.summary(E)
    G, dGx, dGv = cons.values(x_ref, v_ref, b, grad=True)
    g = cons.nominal(x_ref, v_ref)
    out = []
    for j, name in enumerate(cons.names):
        normal = np.concatenate([dGx[j], dGv[j]])
        offset = float(normal @ np.concatenate([x_ref, v_ref]) - g[j])
        out.append(TightenedConstraint(name, normal, offset, float(G[j] - g[j])))
    return out


# ---------------------------------------------------------------------------
# grading geometry

def boundary_radius(p_x: float, direction_yz, fp: FunnelParams, tol: float = BISECTION_TOL) -> float:
    """Distance from the funnel axis to its boundary at ``p_x`` along a lateral ray.

    Returns ``nan`` when the funnel is closed at ``p_x`` (every lateral
    point violates the constraint).
    """
    u = np.asarray(direction_yz, dtype=float)
    u = u / np.linalg.norm(u)

    def h(r):
        return funnel_h(np.array([p_x, r * u[0], r * u[1]]), fp)

    if h(0.0) > 0:
        return math.nan
    lo, hi = 0.0, max(fp.c_y, fp.c_z)
    while h(hi) <= 0:
        lo, hi = hi, 2 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def signed_breach_distance(p, fp: FunnelParams) -> float:
    """Signed lateral distance to the funnel wall at the same depth (m).

    Positive outside, negative inside. Points on the axis use the ``+y``
    ray. Where the funnel is closed at ``p_x`` the point is outside with
    no finite distance and ``+inf`` is returned.
    """
    p = np.asarray(p, dtype=float)
    lat = p[1:3]
    r = float(np.linalg.norm(lat))
    ray = lat if r > 0 else np.array([1.0, 0.0])
    rb = boundary_radius(float(p[0]), ray, fp)
    if math.isnan(rb):
        return math.inf
    return r - rb


def screw_breach(x, fp: FunnelParams, n_points: int = 21) -> float:
    """Largest signed breach distance along the screw from tip to head."""
    x = np.asarray(x, dtype=float)
    tip = x[:3]
    head = head_point(x, fp)
    pts = tip + np.linspace(0.0, 1.0, n_points)[:, None] * (head - tip)
    return max(signed_breach_distance(pt, fp) for pt in pts)


GR_GRADES = ("A", "B", "C", "D", "E")


def gr_grade(max_breach: float) -> str:
    """Gertzbein-Robbins grade from the largest breach in metres (2 mm steps)."""
    if max_breach <= 0:
        return "A"
    if max_breach <= 0.002:
        return "B"
    if max_breach <= 0.004:
        return "C"
    if max_breach <= 0.006:
        return "D"
    return "E"


@dataclass(frozen=True)
class Cylinder:
    base: np.ndarray
    axis: np.ndarray
    radius: float
    length: float

    @classmethod
    def from_pose(cls, p, d, radius: float, length: float) -> "Cylinder":
        d = np.asarray(d, dtype=float)
        return cls(np.asarray(p, dtype=float), d / np.linalg.norm(d), radius, length)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.base
        t = rel @ self.axis
        radial = rel - t[:, None] * self.axis
        return (t >= 0) & (t <= self.length) & (np.einsum("ij,ij->i", radial, radial) <= self.radius ** 2)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.base, self.base + self.length * self.axis
        ext = self.radius * np.sqrt(np.clip(1.0 - self.axis ** 2, 0.0, None))
        return np.minimum(a, b) - ext, np.maximum(a, b) + ext


def cylinder_iou(pose_a, pose_b, radius: float, length: float, n_samples: int = 1_000_000,
                 rng: Optional[np.random.Generator] = None, chunk: int = 250_000) -> tuple[float, float]:
    """Monte-Carlo intersection-over-union of two cylinders and its standard error.

    Poses are ``(tip_point, direction)``; each cylinder runs from the tip
    along the direction for ``length``. Points are drawn uniformly in the
    bounding box of the union.
    """
    if radius <= 0 or length <= 0:
        raise ValueError("radius and length must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    ca = Cylinder.from_pose(*pose_a, radius, length)
    cb = Cylinder.from_pose(*pose_b, radius, length)
    la, ua = ca.bounding_box()
    lb, ub = cb.bounding_box()
    lo, hi = np.minimum(la, lb), np.maximum(ua, ub)
    n_union = n_inter = 0
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        pts = lo + rng.uniform(size=(k, 3)) * (hi - lo)
        ia, ib = ca.contains(pts), cb.contains(pts)
        n_union += int(np.count_nonzero(ia | ib))
        n_inter += int(np.count_nonzero(ia & ib))
        left -= k
    if n_union == 0:
        return 0.0, 0.0
    iou = n_inter / n_union
    return iou, math.sqrt(iou * (1 - iou) / n_union)
