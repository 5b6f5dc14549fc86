"""Set calculus against brute-force oracles in dimension <= 3."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from sgmpc import sets
from sgmpc.sets import Ellipsoid, SetExpr, Zonotope

TOL = 1e-6


def vertices(z: Zonotope) -> np.ndarray:
    m = z.n_generators
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=m))) if m else np.zeros((1, 0))
    return z.center + signs @ z.generators.T


def brute_support_zono(z, a):
    return float(np.max(vertices(z) @ a))


def brute_support_ell(e, a, n=200_000, seed=0):
    # dense sample of the unit sphere pushed through the shape matrix
    u = np.random.default_rng(seed).standard_normal((n, e.shape.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return float(np.max((e.center + u @ e.shape.T) @ a))


def lp_in_zonotope(z, p) -> float:
    """Smallest infinity-norm coefficient vector reaching ``p`` (inf when unreachable)."""
    m = z.n_generators
    I, one = np.eye(m), np.ones((m, 1))
    res = linprog(np.r_[np.zeros(m), 1.0], A_ub=np.block([[I, -one], [-I, -one]]), b_ub=np.zeros(2 * m),
                  A_eq=np.c_[z.generators, np.zeros(z.dim)], b_eq=p - z.center,
                  bounds=[(None, None)] * m + [(0, None)], method="highs")
    return res.x[-1] if res.status == 0 else np.inf


def socp_gauge(expr: SetExpr, p) -> float:
    """Smallest ellipsoid gauge of ``p - zonotope point``, solved independently with cvxpy."""
    cp = pytest.importorskip("cvxpy")
    e, z = expr.ellipsoid, expr.zonotope
    g = cp.Variable(z.n_generators)
    u = cp.Variable(e.shape.shape[1])
    prob = cp.Problem(cp.Minimize(cp.norm(u)),
                      [e.center + z.center + e.shape @ u + z.generators @ g == p, cp.abs(g) <= 1])
    prob.solve()
    return float(prob.value)


dims = st.integers(1, 3)


@st.composite
def zonotopes(draw, dim=None, max_gens=5):
    n = draw(dims) if dim is None else dim
    m = draw(st.integers(0, max_gens))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    r = np.random.default_rng(seed)
    return Zonotope(r.normal(size=n), r.normal(size=(n, m)))


@st.composite
def ellipsoids(draw, dim=None):
    n = draw(dims) if dim is None else dim
    k = draw(st.integers(1, n))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    r = np.random.default_rng(seed)
    return Ellipsoid(r.normal(size=n), r.normal(size=(n, k)))


def unit_dirs(n, k, seed=1):
    a = np.random.default_rng(seed).normal(size=(k, n))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


# -- support ------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(zonotopes())
def test_zonotope_support_matches_vertex_enumeration(z):
    for a in unit_dirs(z.dim, 8):
        assert sets.support(z, a) == pytest.approx(brute_support_zono(z, a), abs=TOL)


@settings(max_examples=20, deadline=None)
@given(ellipsoids())
def test_ellipsoid_support_matches_sampled_sphere(e):
    for a in unit_dirs(e.dim, 3):
        exact = sets.support(e, a)
        sampled = brute_support_ell(e, a)
        assert sampled <= exact + 1e-12
        # sampling can only approach the maximum from below
        assert exact - sampled <= 5e-2 * (np.linalg.norm(e.shape) + 1)


def test_ellipsoid_support_closed_form_axis_aligned():
    e = Ellipsoid(np.array([1.0, -2.0]), np.diag([3.0, 0.5]))
    assert sets.support(e, [1.0, 0.0]) == pytest.approx(4.0)
    assert sets.support(e, [0.0, -1.0]) == pytest.approx(2.5)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_minkowski_sum_support_is_additive(data):
    n = data.draw(dims)
    e = data.draw(ellipsoids(dim=n))
    z = data.draw(zonotopes(dim=n))
    s = sets.minkowski_sum_expr(e, z)
    for a in unit_dirs(n, 5):
        assert sets.support(s, a) == pytest.approx(sets.support(e, a) + sets.support(z, a), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(zonotopes(), st.integers(0, 2 ** 32 - 1))
def test_affine_map_support_identity(z, seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(z.dim, z.dim))
    b = r.normal(size=z.dim)
    img = sets.affine_map(z, A, b)
    for a in unit_dirs(z.dim, 4):
        if np.linalg.norm(A.T @ a) < 1e-9:
            continue
        assert sets.support(img, a) == pytest.approx(sets.support(z, A.T @ a) + a @ b, abs=1e-9)


def test_zero_direction_rejected():
    with pytest.raises(ValueError):
        sets.support(Zonotope.zero(2), [0.0, 0.0])


def test_dimension_mismatch_raises():
    with pytest.raises(sets.DimensionError):
        sets.minkowski_sum(Zonotope.zero(2), Zonotope.zero(3))
    with pytest.raises(sets.DimensionError):
        sets.support(Zonotope.zero(2), [1.0, 0.0, 0.0])


# -- reduction and radius ---------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 3))
def test_generator_reduction_is_outer(seed, n):
    r = np.random.default_rng(seed)
    z = Zonotope(r.normal(size=n), r.normal(size=(n, 12)))
    red = sets.reduce_generators(z, n + 2)
    assert red.n_generators <= n + 2
    for a in unit_dirs(n, 20, seed):
        assert sets.support(red, a) >= sets.support(z, a) - 1e-12


def test_reduction_below_dimension_refused():
    z = Zonotope(np.zeros(3), np.eye(3)[:, [0, 1, 2, 0, 1]])
    with pytest.raises(ValueError):
        sets.reduce_generators(z, 2)


@settings(max_examples=30, deadline=None)
@given(zonotopes())
def test_radius_bounds_every_vertex(z):
    assert sets.radius(z) >= np.max(np.linalg.norm(vertices(z), axis=1)) - 1e-12


# -- membership -------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(zonotopes(max_gens=4), st.integers(0, 2 ** 32 - 1))
def test_zonotope_membership_matches_lp(z, seed):
    pts = z.center + np.random.default_rng(seed).normal(size=(30, z.dim)) * (1 + np.abs(z.generators).sum())
    got = sets.contains_many(z, pts)
    for p, g in zip(pts, got):
        s = lp_in_zonotope(z, p)
        if abs(s - 1.0) < 1e-6:
            continue  # too close to the boundary to call
        assert g == int(s <= 1.0)


def test_sum_membership_matches_socp(rng):
    e = Ellipsoid(np.array([0.1, 0.0, -0.2]), np.diag([0.5, 0.2, 0.1]))
    z = Zonotope(np.zeros(3), rng.normal(size=(3, 4)) * 0.3)
    s = sets.minkowski_sum_expr(e, z)
    pts = rng.normal(size=(40, 3))
    got = sets.contains_many(s, pts)
    for p, g in zip(pts, got):
        gauge = socp_gauge(s, p)
        if abs(gauge - 1.0) < 1e-4:
            continue
        assert g == int(gauge <= 1.0)


def test_degenerate_ellipsoid_membership():
    seg = Ellipsoid(np.zeros(2), np.array([[1.0], [0.0]]))
    assert sets.contains(seg, [0.5, 0.0])
    assert not sets.contains(seg, [0.5, 1e-6])


def test_high_dimensional_zonotope_membership_is_exact(rng):
    # many more generators than dimensions: the first-order phase stalls here
    G = rng.normal(size=(10, 60)) * rng.uniform(1e-3, 1.0, size=60)
    z = Zonotope(np.zeros(10), G)
    g = rng.uniform(-0.97, 0.97, size=(25, 60))
    assert np.all(sets.contains_many(z, g @ G.T) == 1)


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_sampled_points_are_members(data):
    n = data.draw(dims)
    s = sets.minkowski_sum_expr(data.draw(ellipsoids(dim=n)), data.draw(zonotopes(dim=n)))
    pts = sets.sample_set(s, 50, np.random.default_rng(data.draw(st.integers(0, 1000))))
    assert np.all(sets.contains_many(s, pts, tol=1e-7) == 1)


# -- serialisation ----------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.data())
def test_json_round_trip(data):
    n = data.draw(dims)
    s = sets.minkowski_sum_expr(data.draw(ellipsoids(dim=n)), data.draw(zonotopes(dim=n)))
    back = sets.loads(sets.dumps(s))
    assert sets.allclose(s, back)
