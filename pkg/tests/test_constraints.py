"""Funnel geometry, robust tightening soundness and clinical grading."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmpc import constraints as cons
from sgmpc import sets
from sgmpc.sets import Ellipsoid, SetExpr, Zonotope

FP = cons.FunnelParams()
FC = cons.FunnelConstraints(FP)
N_SOUNDNESS = 1000


def random_deviation_set(seed, scale=1.0):
    r = np.random.default_rng(seed)
    s = np.r_[np.full(3, 1e-3), np.full(2, 2e-2), np.full(3, 1e-3), np.full(2, 2e-2)] * scale
    E = Ellipsoid(np.zeros(10), r.normal(size=(10, 10)) * s[:, None] * 0.5)
    Z = Zonotope(r.normal(size=10) * s * 0.1, r.normal(size=(10, 6)) * s[:, None] * 0.5)
    return SetExpr(E, Z)


# -- geometry --------------------------------------------------------------------

def test_direction_convention_anchor():
    x = np.zeros(5)
    assert np.allclose(cons.head_point(x, FP), [FP.screw_length, 0.0, 0.0])
    assert np.allclose(cons.direction(math.pi / 2, 0.0), [0.0, 1.0, 0.0], atol=1e-15)


def test_breakthrough_value_at_zero_depth():
    assert cons.tip_and_head_constraints(np.array([0.0, 0.001, 0.0, 0.1, 0.0]), FP)[2] == 0.0


def test_head_funnel_value_decreases_toward_the_wide_end():
    x = np.array([-0.02, 0.0, 0.0, math.pi, 0.0])  # pointing along -x
    x2 = x.copy()
    x2[0] -= 0.01
    h1 = cons.tip_and_head_constraints(x, FP)[1]
    h2 = cons.tip_and_head_constraints(x2, FP)[1]
    assert h2 < h1 < cons.tip_and_head_constraints(x, FP)[0]


def test_isotropic_boundary_radius_closed_form():
    fp = cons.FunnelParams(c_y=0.15, c_z=0.15, c_2=0.3)
    for px in (-0.05, -0.02, 0.0, 0.01):
        closed = 0.15 * (math.exp(0.5 * (-px / fp.c_x - fp.c_2)) - fp.c_1)
        for ray in ([1.0, 0.0], [0.3, -0.7]):
            assert cons.boundary_radius(px, ray, fp) == pytest.approx(closed, abs=1e-8)


def test_point_on_boundary_has_zero_breach():
    r = cons.boundary_radius(-0.01, [0.6, 0.8], FP)
    p = np.array([-0.01, 0.6 * r, 0.8 * r])
    assert cons.signed_breach_distance(p, FP) == pytest.approx(0.0, abs=1e-8)
    assert abs(cons.funnel_h(p, FP)) < 1e-8


@settings(max_examples=200)
@given(st.floats(-0.08, 0.03), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_breach_sign_agrees_with_h(px, py, pz):
    p = np.array([px, py, pz])
    h = cons.funnel_h(p, FP)
    d = cons.signed_breach_distance(p, FP)
    if abs(h) < 1e-9:
        return
    assert (d <= 0) == (h <= 0)


def test_closed_funnel_reports_outside():
    assert math.isnan(cons.boundary_radius(0.2, [1.0, 0.0], FP))
    assert cons.signed_breach_distance(np.array([0.2, 0.0, 0.0]), FP) == math.inf


@pytest.mark.parametrize("breach,grade", [(-0.001, "A"), (0.0, "A"), (0.001, "B"), (0.002, "B"),
                                          (0.003, "C"), (0.005, "D"), (0.0061, "E")])
def test_gr_grades(breach, grade):
    assert cons.gr_grade(breach) == grade


# -- IOU -------------------------------------------------------------------------------

def test_iou_identical_and_disjoint():
    rng = np.random.default_rng(0)
    pose = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
    iou, se = cons.cylinder_iou(pose, pose, 0.002, 0.04, 200_000, rng)
    assert iou == 1.0
    far = (np.array([0.0, 0.01, 0.0]), np.array([1.0, 0.0, 0.0]))
    assert cons.cylinder_iou(pose, far, 0.002, 0.04, 200_000, rng)[0] == 0.0


def test_iou_coaxial_half_offset_is_one_third():
    rng = np.random.default_rng(1)
    a = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
    b = (np.array([0.02, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    iou, se = cons.cylinder_iou(a, b, 0.002, 0.04, 1_000_000, rng)
    assert se > 0
    assert abs(iou - 1.0 / 3.0) <= 4 * se


def test_iou_rejects_bad_geometry():
    pose = (np.zeros(3), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        cons.cylinder_iou(pose, pose, 0.0, 0.04)


# -- robust tightening ---------------------------------------------------------------

def _active_point(j, E, seed):
    """A state/input pair on the boundary G_j = 0 of the robust constraint."""
    r = np.random.default_rng(seed)
    b = FC.summary(E)
    for _ in range(100):
        x0 = np.array([-0.04, 0.0, 0.0, 0.0, 0.0]) + r.normal(size=5) * [0.005, 0.002, 0.002, 0.05, 0.5]
        v0 = r.normal(size=5) * 0.2 * np.asarray(FP.u_bar)
        if FC.values(x0, v0, b)[j] >= 0:
            continue
        d = np.r_[r.normal(size=5) * [0.02, 0.01, 0.01, 0.3, 1.0], r.normal(size=5) * np.asarray(FP.u_bar)]
        lo, hi = 0.0, 1.0
        while FC.values(x0 + hi * d[:5], v0 + hi * d[5:], b)[j] < 0:
            hi *= 2
            if hi > 1e3:
                break
        else:
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if FC.values(x0 + mid * d[:5], v0 + mid * d[5:], b)[j] <= 0:
                    lo = mid
                else:
                    hi = mid
            return x0 + lo * d[:5], v0 + lo * d[5:]
    raise RuntimeError("no boundary point found")


@pytest.mark.parametrize("j", range(FC.n_constraints))
def test_robust_constraint_soundness(j):
    """G_j(x, v; E) <= 0 implies g_j at every sampled point of [x; v] + E (boundary included)."""
    E = random_deviation_set(j)
    x, v = _active_point(j, E, 100 + j)
    rng = np.random.default_rng(200 + j)
    xi = np.vstack([sets.sample_set(E, N_SOUNDNESS // 2, rng),
                    sets.sample_set(E, N_SOUNDNESS // 2, rng, boundary=True)])
    g = FC.nominal(x + xi[:, :5], v + xi[:, 5:])[:, j]
    assert np.max(g) <= 1e-8


@pytest.mark.parametrize("name", ["tip", "head", "breakthrough"])
def test_linearized_tightening_soundness(name):
    E = random_deviation_set(7, scale=2.0)
    j = FC.names.index(name)
    x_ref, v_ref = _active_point(j, E, 11)
    rows = {c.name: c for c in cons.linearize_and_tighten(x_ref, E, FP, v_ref)}
    assert rows[name].satisfied(x_ref, v_ref, tol=1e-12)
    rng = np.random.default_rng(3)
    xi = np.vstack([sets.sample_set(E, N_SOUNDNESS // 2, rng),
                    sets.sample_set(E, N_SOUNDNESS // 2, rng, boundary=True)])
    g = FC.nominal(x_ref + xi[:, :5], v_ref + xi[:, 5:])[:, j]
    assert np.max(g) <= 1e-8


def test_zero_deviation_gives_zero_margins():
    rows = cons.linearize_and_tighten(np.array([-0.03, 0.001, 0.0, 0.1, 0.2]), Zonotope.zero(10), FP)
    assert all(abs(r.margin) <= 1e-15 for r in rows)


def test_breakthrough_margin_is_the_support_along_px():
    E = random_deviation_set(5)
    rows = {c.name: c for c in cons.linearize_and_tighten(np.array([-0.03, 0.0, 0.0, 0.0, 0.0]), E, FP)}
    e = np.zeros(10)
    e[0] = 1.0
    assert rows["breakthrough"].margin == pytest.approx(sets.support(E, e), abs=1e-15)
    e = np.zeros(10)
    e[7] = -1.0
    assert rows["u2-"].margin == pytest.approx(sets.support(E, e), abs=1e-15)


def test_linearization_outside_operating_box_refused():
    with pytest.raises(ValueError):
        cons.linearize_and_tighten(np.array([0.5, 0.0, 0.0, 0.0, 0.0]), None, FP)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 2.0))
def test_tightening_is_monotone_in_the_set(seed, extra):
    E = random_deviation_set(seed)
    r = np.random.default_rng(seed + 1)
    bigger = sets.minkowski_sum_expr(E, Zonotope(np.zeros(10), r.normal(size=(10, 3)) * 1e-3 * extra))
    x = np.array([-0.03, 0.001, -0.001, 0.05, 0.3])
    v = np.zeros(5)
    assert np.all(FC.values(x, v, FC.summary(E)) <= FC.values(x, v, FC.summary(bigger)) + 1e-15)


def test_summary_is_additive_and_homogeneous():
    E1, E2 = random_deviation_set(1), random_deviation_set(2)
    Z = Zonotope(np.zeros(10), np.random.default_rng(0).normal(size=(10, 4)) * 1e-3)
    s1 = FC.summary(SetExpr(E1.ellipsoid, Z))
    parts = FC.summary(E1.ellipsoid) + FC.summary(Z)
    # supports add exactly; the radii are upper bounds that add at most
    idx = [cons.S_PX, cons.S_TH_POS, cons.S_TH_NEG] + list(range(5, 15))
    assert np.allclose(s1[idx], parts[idx], atol=1e-15)
    assert np.all(s1[[cons.R_LAT, cons.R_DIR]] <= parts[[cons.R_LAT, cons.R_DIR]] + 1e-15)
    assert np.allclose(FC.summary(sets.affine_map(E2, 3.0 * np.eye(10))), 3.0 * FC.summary(E2))


def test_gradients_match_finite_differences():
    x = np.array([-0.03, 0.002, -0.001, 0.3, 0.7])
    v = np.array([0.001, -0.001, 0.0, 0.01, 0.0])
    b = FC.summary(random_deviation_set(4))
    G, dGx, dGv = FC.values(x, v, b, grad=True)
    h = 1e-7
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        fd = (FC.values(x + e, v, b) - FC.values(x - e, v, b)) / (2 * h)
        assert np.allclose(dGx[:, i], fd, rtol=1e-5, atol=1e-6)
        fd = (FC.values(x, v + e, b) - FC.values(x, v - e, b)) / (2 * h)
        assert np.allclose(dGv[:, i], fd, atol=1e-6)


def test_halfspace_constraints_are_exact_for_linear_rows():
    hc = cons.HalfspaceConstraints.input_box([1.0, 2.0], n=2)
    E = Zonotope(np.zeros(4), np.diag([0.0, 0.0, 0.1, 0.3]))
    b = hc.summary(E)
    assert np.allclose(b, [0.1, 0.3, 0.1, 0.3])
    assert np.allclose(hc.values(np.zeros(2), np.array([0.9, 0.0]), b), [0.0, -1.7, -1.8, -1.7])
