"""Set calculus for ellipsoids, zonotopes and their Minkowski sums.

Ellipsoids are stored as affine images of the unit ball,
``{center + shape @ u : ||u||_2 <= 1}``, so rank-deficient sets need no
special handling. Zonotopes are ``{center + G @ g : g in [-1, 1]^m}`` with
the generators stored as the columns of ``G``. A :class:`SetExpr` is the
Minkowski sum of at most one of each.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

DEFAULT_MEMBERSHIP_TOL = 1e-9
DEFAULT_MAX_GENERATORS = 60

# exact zonotope radius by sign enumeration up to this many generators
_EXACT_RADIUS_MAX_GENERATORS = 14
_RADIUS_ANGLES_2D = 720


class DimensionError(ValueError):
    """Raised when operands have incompatible dimensions."""


class IndeterminateMembership(RuntimeError):
    """Raised when a membership query cannot be decided within the iteration cap."""


def _vec(x) -> np.ndarray:
    v = np.array(x, dtype=float).reshape(-1)
    v.setflags(write=False)
    return v


def _mat(x, rows: int) -> np.ndarray:
    m = np.array(x, dtype=float)
    if m.size == 0:
        m = np.zeros((rows, 0))
    if m.ndim == 1:
        m = m.reshape(rows, -1)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """Affine image of the unit ball: ``{center + shape @ u : ||u|| <= 1}``."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = _vec(self.center)
        s = _mat(self.shape, c.size)
        if s.shape[0] != c.size:
            raise DimensionError(f"shape has {s.shape[0]} rows, center has {c.size} entries")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", s)

    @property
    def dim(self) -> int:
        return self.center.size

    @classmethod
    def ball(cls, dim: int, radius: float = 1.0, center=None) -> "Ellipsoid":
        c = np.zeros(dim) if center is None else center
        return cls(c, radius * np.eye(dim))

    @classmethod
    def from_psd(cls, Q, center=None, scale: float = 1.0) -> "Ellipsoid":
        """Ellipsoid ``{x : (x-c)^T Q^+ (x-c) <= scale^2}`` built from a PSD matrix.

        The square root uses a symmetric eigendecomposition with negative
        eigenvalues clamped at zero, so singular ``Q`` is fine.
        """
        Q = np.asarray(Q, dtype=float)
        Q = 0.5 * (Q + Q.T)
        w, V = np.linalg.eigh(Q)
        root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
        c = np.zeros(Q.shape[0]) if center is None else center
        return cls(c, scale * root)

    def __repr__(self):
        return f"Ellipsoid(dim={self.dim}, rank<={self.shape.shape[1]})"


@dataclass(frozen=True, eq=False)
class Zonotope:
    """``{center + generators @ g : g in [-1, 1]^m}``; generators are columns."""

    center: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        c = _vec(self.center)
        g = _mat(self.generators, c.size)
        if g.shape[0] != c.size:
            raise DimensionError(f"generators have {g.shape[0]} rows, center has {c.size} entries")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    @classmethod
    def point(cls, center) -> "Zonotope":
        c = np.asarray(center, dtype=float).reshape(-1)
        return cls(c, np.zeros((c.size, 0)))

    @classmethod
    def zero(cls, dim: int) -> "Zonotope":
        return cls.point(np.zeros(dim))

    @classmethod
    def box(cls, lower, upper) -> "Zonotope":
        """Axis-aligned box; zero-width axes get no generator."""
        lo = np.asarray(lower, dtype=float).reshape(-1)
        hi = np.asarray(upper, dtype=float).reshape(-1)
        if np.any(hi < lo):
            raise ValueError("box upper bound below lower bound")
        half = 0.5 * (hi - lo)
        keep = half > 0
        return cls(0.5 * (lo + hi), np.diag(half)[:, keep])

    @classmethod
    def symmetric_box(cls, half_widths) -> "Zonotope":
        h = np.abs(np.asarray(half_widths, dtype=float).reshape(-1))
        return cls.box(-h, h)

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.abs(self.generators).sum(axis=1)
        return self.center - r, self.center + r

    def __repr__(self):
        return f"Zonotope(dim={self.dim}, generators={self.n_generators})"


@dataclass(frozen=True, eq=False)
class SetExpr:
    """Minkowski sum of an optional ellipsoid and an optional zonotope."""

    ellipsoid: Optional[Ellipsoid] = None
    zonotope: Optional[Zonotope] = None

    def __post_init__(self):
        if self.ellipsoid is None and self.zonotope is None:
            raise ValueError("SetExpr needs at least one part; use Zonotope.zero for {0}")
        if self.ellipsoid is not None and self.zonotope is not None:
            if self.ellipsoid.dim != self.zonotope.dim:
                raise DimensionError("ellipsoid and zonotope dimensions differ")

    @property
    def dim(self) -> int:
        part = self.ellipsoid if self.ellipsoid is not None else self.zonotope
        return part.dim

    @property
    def center(self) -> np.ndarray:
        c = np.zeros(self.dim)
        if self.ellipsoid is not None:
            c = c + self.ellipsoid.center
        if self.zonotope is not None:
            c = c + self.zonotope.center
        return c

    def __repr__(self):
        return f"SetExpr({self.ellipsoid!r}, {self.zonotope!r})"


AnySet = Union[Ellipsoid, Zonotope, SetExpr]


def as_setexpr(s: AnySet) -> SetExpr:
    if isinstance(s, SetExpr):
        return s
    if isinstance(s, Ellipsoid):
        return SetExpr(ellipsoid=s)
    if isinstance(s, Zonotope):
        return SetExpr(zonotope=s)
    raise TypeError(f"not a set: {type(s).__name__}")


def _parts(s: AnySet) -> tuple[Optional[Ellipsoid], Optional[Zonotope]]:
    s = as_setexpr(s)
    return s.ellipsoid, s.zonotope


def affine_map(s: AnySet, A, b=None):
    """Image ``{A x + b : x in s}``; the result has the same type as ``s``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    dim = s.dim
    if A.shape[1] != dim:
        raise DimensionError(f"matrix has {A.shape[1]} columns, set has dimension {dim}")
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(-1)
    if b.size != A.shape[0]:
        raise DimensionError("offset length does not match the matrix row count")
    if isinstance(s, Ellipsoid):
        return Ellipsoid(A @ s.center + b, A @ s.shape)
    if isinstance(s, Zonotope):
        return Zonotope(A @ s.center + b, A @ s.generators)
    ell, zono = s.ellipsoid, s.zonotope
    new_ell = affine_map(ell, A, b) if ell is not None else None
    if zono is not None:
        new_zono = affine_map(zono, A, None if new_ell is not None else b)
    else:
        new_zono = None
    return SetExpr(new_ell, new_zono)


def minkowski_sum(a: Zonotope, b: Zonotope) -> Zonotope:
    if a.dim != b.dim:
        raise DimensionError(f"cannot add sets of dimension {a.dim} and {b.dim}")
    return Zonotope(a.center + b.center, np.hstack([a.generators, b.generators]))


def minkowski_sum_expr(a: AnySet, b: AnySet) -> SetExpr:
    """Minkowski sum of two set expressions holding at most one ellipsoid."""
    ea, za = _parts(a)
    eb, zb = _parts(b)
    if ea is not None and eb is not None:
        raise ValueError("sum of two ellipsoids is not an ellipsoid; not represented")
    ell = ea if ea is not None else eb
    if za is not None and zb is not None:
        zono = minkowski_sum(za, zb)
    else:
        zono = za if za is not None else zb
    if ell is not None and zono is not None and ell.dim != zono.dim:
        raise DimensionError("dimension mismatch")
    return SetExpr(ell, zono)


def support(s: AnySet, a) -> np.ndarray | float:
    """Support function ``max_{x in s} a . x``.

    ``a`` may be a single direction or a stack of directions (one per row).
    """
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    A = np.atleast_2d(a)
    if A.shape[1] != s.dim:
        raise DimensionError(f"direction has {A.shape[1]} entries, set has dimension {s.dim}")
    if np.any(np.all(A == 0.0, axis=1)):
        raise ValueError("support direction must be nonzero")
    ell, zono = _parts(s)
    h = np.zeros(A.shape[0])
    if ell is not None:
        h += A @ ell.center + np.linalg.norm(A @ ell.shape, axis=1)
    if zono is not None:
        h += A @ zono.center + np.abs(A @ zono.generators).sum(axis=1)
    return float(h[0]) if single else h


def _zonotope_radius0(G: np.ndarray) -> float:
    """Upper bound on ``max ||G g||`` over the unit cube (exact for few generators)."""
    m = G.shape[1]
    if m == 0:
        return 0.0
    if m <= _EXACT_RADIUS_MAX_GENERATORS:
        # fixing the first sign halves the enumeration by symmetry
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=m - 1)))
        signs = np.hstack([np.ones((signs.shape[0], 1)), signs]) if m > 1 else np.ones((1, 1))
        return float(np.max(np.linalg.norm(signs @ G.T, axis=1)))
    return float(min(np.linalg.norm(G, axis=0).sum(), np.linalg.norm(G, 2) * np.sqrt(m)))


def radius(s: AnySet) -> float:
    """Upper bound on ``max_{x in s} ||x||``, i.e. on the support over unit directions.

    Exact for centred ellipsoids and for zonotopes with few generators; in
    one or two dimensions an angular sweep with a ``1/cos(pi/N)`` correction
    is used, which is a certified bound.
    """
    ell, zono = _parts(s)
    if s.dim == 1:
        return float(max(support(s, [1.0]), support(s, [-1.0])))
    if s.dim == 2:
        ang = np.linspace(0.0, 2 * np.pi, _RADIUS_ANGLES_2D, endpoint=False)
        dirs = np.column_stack([np.cos(ang), np.sin(ang)])
        h = support(s, dirs)
        return float(max(h.max(), 0.0) / np.cos(np.pi / _RADIUS_ANGLES_2D))
    r = float(np.linalg.norm(as_setexpr(s).center))
    if ell is not None:
        r += float(np.linalg.norm(ell.shape, 2)) if ell.shape.size else 0.0
    if zono is not None:
        r += _zonotope_radius0(zono.generators)
    return r


def reduce_generators(z: Zonotope, max_generators: int = DEFAULT_MAX_GENERATORS) -> Zonotope:
    """Outer approximation keeping at most ``max_generators`` generators.

    The generators with the smallest ``||g||_1 - ||g||_inf`` score are
    replaced by their interval hull (one axis-aligned generator per
    coordinate), which contains their Minkowski sum.
    """
    n, m = z.dim, z.n_generators
    if m <= max_generators:
        return z
    if max_generators < n:
        raise ValueError(f"generator budget {max_generators} is below the dimension {n}")
    G = z.generators
    score = np.abs(G).sum(axis=0) - np.abs(G).max(axis=0)
    order = np.argsort(score, kind="stable")
    n_keep = max_generators - n
    small, keep = order[: m - n_keep], np.sort(order[m - n_keep:])
    box = np.diag(np.abs(G[:, small]).sum(axis=1))
    box = box[:, np.any(box != 0, axis=0)]
    return Zonotope(z.center, np.hstack([G[:, keep], box]))


def prune_zero_generators(z: Zonotope, atol: float = 0.0) -> Zonotope:
    G = z.generators
    keep = np.abs(G).max(axis=0) > atol if G.shape[1] else np.zeros(0, dtype=bool)
    return Zonotope(z.center, G[:, keep])


class _Gauge:
    """Whitening transform for the ellipsoid part of a membership test.

    Range directions are scaled by the inverse singular values; directions
    outside the range of the shape matrix are scaled by ``1/tau`` so a
    residual of length ``tau`` there costs one unit of gauge.
    """

    def __init__(self, ell: Optional[Ellipsoid], dim: int, tau: float):
        if ell is None or ell.shape.size == 0:
            self.T = np.eye(dim) / tau
            self.center = np.zeros(dim) if ell is None else ell.center
            return
        U, sv, _ = np.linalg.svd(ell.shape, full_matrices=True)
        rank_tol = max(sv.max(initial=0.0) * 1e-12, 1e-300)
        r = int(np.sum(sv > rank_tol))
        scale = np.full(dim, 1.0 / tau)
        scale[:r] = 1.0 / sv[:r]
        self.T = scale[:, None] * U.T
        self.center = ell.center


def contains_many(s: AnySet, points, tol: float = DEFAULT_MEMBERSHIP_TOL,
                  max_iter: int = 10_000, conv_tol: float = 1e-9) -> np.ndarray:
    """Vectorised membership test.

    Returns an int array with 1 (inside), 0 (outside) or -1 (undecided:
    the exact solver failed).

    For each point ``p`` the zonotope coefficients are chosen to minimise
    the squared ellipsoid gauge of ``p - c_z - G g - c_e`` over the box
    ``[-1, 1]^m``; the point is inside when that minimum is at most
    ``(1 + tol)^2``. Projected-gradient steps settle most points, either
    with a feasible witness (inside) or a Frank-Wolfe lower bound
    (outside). Points still open after ``max_iter`` steps, or whose
    iterates stall, are decided exactly: an LP on the coefficient
    infinity norm for a pure zonotope, a bounded least-squares problem
    otherwise.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] != s.dim:
        raise DimensionError(f"points have {P.shape[1]} coordinates, set has dimension {s.dim}")
    ell, zono = _parts(s)
    scale = 1.0 + radius(s)
    tau = max(tol, 1e-12) * scale
    gauge = _Gauge(ell, s.dim, tau)
    c = gauge.center + (zono.center if zono is not None else 0.0)
    B = (P - c) @ gauge.T.T  # whitened residuals, one row per point
    thr = (1.0 + tol) ** 2
    N = P.shape[0]
    result = np.full(N, -1, dtype=int)

    G = zono.generators if zono is not None else np.zeros((s.dim, 0))
    if G.shape[1] == 0:
        f = np.einsum("ij,ij->i", B, B)
        return (f <= thr).astype(int)

    H = gauge.T @ G
    lip = 2.0 * np.linalg.norm(H, 2) ** 2
    if lip == 0.0:
        f = np.einsum("ij,ij->i", B, B)
        return (f <= thr).astype(int)
    step = 1.0 / lip
    # start from the clipped unconstrained least-squares coefficients
    gam = np.clip(np.linalg.lstsq(H, B.T, rcond=None)[0].T, -1.0, 1.0)
    active = np.arange(N)
    exact = np.zeros(0, dtype=int)
    for _ in range(max_iter):
        R = B[active] - gam[active] @ H.T
        f = np.einsum("ij,ij->i", R, R)
        grad = -2.0 * R @ H
        lower = f - np.abs(grad).sum(axis=1) - np.einsum("ij,ij->i", grad, gam[active])
        inside = f <= thr
        outside = ~inside & (lower > thr)
        new = np.clip(gam[active] - step * grad, -1.0, 1.0)
        moved = np.abs(new - gam[active]).max(axis=1)
        stalled = ~inside & ~outside & (moved <= conv_tol)
        result[active[inside]] = 1
        result[active[outside]] = 0
        gam[active] = new
        exact = np.concatenate([exact, active[stalled]])
        active = active[~(inside | outside | stalled)]
        if active.size == 0:
            break
    for i in np.concatenate([exact, active]).astype(int):
        result[i] = _exact_member(H, B[i], P[i] - zono.center, G, ell is None, thr, tol)
    return result


def _exact_member(H, b, r, G, zonotope_only: bool, thr: float, tol: float) -> int:
    from scipy.optimize import linprog, lsq_linear

    if zonotope_only:
        # min s subject to G g = r, |g_j| <= s
        m = G.shape[1]
        I = np.eye(m)
        one = np.ones((m, 1))
        res = linprog(np.r_[np.zeros(m), 1.0], A_ub=np.block([[I, -one], [-I, -one]]), b_ub=np.zeros(2 * m),
                      A_eq=np.c_[G, np.zeros(G.shape[0])], b_eq=r, bounds=[(None, None)] * m + [(0, None)],
                      method="highs")
        if res.status == 2:
            return 0
        if res.status != 0:
            return -1
        return int(res.x[-1] <= 1.0 + tol)
    res = lsq_linear(H, b, bounds=(-1.0, 1.0), method="bvls")
    if not res.success:
        return -1
    f = float(np.sum((H @ res.x - b) ** 2))
    return int(f <= thr)


def contains(s: AnySet, p, tol: float = DEFAULT_MEMBERSHIP_TOL, **kwargs) -> bool:
    """Membership of a single point; raises :class:`IndeterminateMembership` if undecided."""
    r = contains_many(s, np.asarray(p, dtype=float).reshape(1, -1), tol=tol, **kwargs)[0]
    if r < 0:
        raise IndeterminateMembership("membership test did not converge")
    return bool(r)


def sample_set(s: AnySet, n: int, rng: np.random.Generator, boundary: bool = False) -> np.ndarray:
    """Draw points of ``s`` by construction (ball and cube coefficients)."""
    ell, zono = _parts(s)
    out = np.zeros((n, s.dim))
    if ell is not None:
        k = ell.shape.shape[1]
        if k:
            u = rng.standard_normal((n, k))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            if not boundary:
                u *= rng.uniform(size=(n, 1)) ** (1.0 / k)
            out += u @ ell.shape.T
        out += ell.center
    if zono is not None:
        m = zono.n_generators
        if m:
            g = rng.choice([-1.0, 1.0], size=(n, m)) if boundary else rng.uniform(-1, 1, (n, m))
            out += g @ zono.generators.T
        out += zono.center
    return out


def allclose(a: AnySet, b: AnySet, atol: float = 1e-12, n_dirs: int = 200, seed: int = 0) -> bool:
    """Equality up to ``atol`` judged by support values in random directions."""
    if a.dim != b.dim:
        return False
    dirs = np.random.default_rng(seed).standard_normal((n_dirs, a.dim))
    return bool(np.allclose(support(a, dirs), support(b, dirs), atol=atol, rtol=0.0))


def to_dict(s: AnySet) -> dict:
    ell, zono = _parts(s)
    center = as_setexpr(s).center
    out: dict = {"center": center.tolist()}
    if ell is not None:
        out["shape"] = ell.shape.tolist()
    if zono is not None:
        out["generators"] = zono.generators.T.tolist()
    return out


def from_dict(d: dict) -> AnySet:
    unknown = set(d) - {"center", "shape", "generators"}
    if unknown:
        raise ValueError(f"unknown set fields: {sorted(unknown)}")
    c = np.asarray(d["center"], dtype=float).reshape(-1)
    n = c.size
    ell = zono = None
    if "shape" in d:
        ell = Ellipsoid(c, np.asarray(d["shape"], dtype=float).reshape(n, -1))
    if "generators" in d:
        gens = np.asarray(d["generators"], dtype=float)
        G = gens.reshape(-1, n).T if gens.size else np.zeros((n, 0))
        zono = Zonotope(np.zeros(n) if ell is not None else c, G)
    if ell is None and zono is None:
        return Zonotope.point(c)
    if ell is not None and zono is not None:
        return SetExpr(ell, zono)
    return ell if ell is not None else zono


def dumps(s: AnySet) -> str:
    return json.dumps(to_dict(s))


def loads(text: str) -> AnySet:
    return from_dict(json.loads(text))
