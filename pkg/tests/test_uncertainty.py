"""Error system, variance-proxy and bias-set recursions, confidence radii, PRS schedules."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmpc import sets
from sgmpc.controller import design_gains
from sgmpc.sets import Zonotope
from sgmpc.uncertainty import (NoiseBudget, PRSSchedule, StabilityError, assemble_error_system,
                               build_prs_schedule, chi2_quantile, gaussian_radius, initial_proxy, kappa,
                               kappa_inv, measurement_systems, propagate_variance_proxy,
                               subgaussian_radius)

# kappa^{-1} at a few points, 20 significant digits, from mpmath.findroot at 50 digits
KAPPA_INV_FROZEN = {
    1.01: 0.14777978839331808025,
    2.0: 1.6783469900166606534,
    2.5118864315095801111: 2.0293979359778174402,  # 0.01 ** (-2/10)
    10.0: 3.8897201698674290579,
    1e4: 11.75637122249541943,
    1e6: 16.688420790859919671,
}


def two_state_system():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    C = np.eye(2)
    g = design_gains(A, B, np.eye(2), np.array([[0.1]]), L=np.diag([0.5, 0.4]), C=C)
    return A, B, C, g


# -- kappa ---------------------------------------------------------------------------

@pytest.mark.parametrize("y,x", sorted(KAPPA_INV_FROZEN.items()))
def test_kappa_inv_frozen_values(y, x):
    assert kappa_inv(y) == pytest.approx(x, abs=1e-10)


def test_kappa_inv_against_mpmath():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    for y in (1.5, 3.7, 123.0):
        ref = mp.findroot(lambda x: x - mp.log(1 + x) - mp.log(y), (mp.mpf(0), mp.mpf(60)), solver="anderson")
        assert kappa_inv(y) == pytest.approx(float(ref), abs=1e-10)


@settings(max_examples=200)
@given(st.floats(1.0, 1e12))
def test_kappa_inv_round_trip(y):
    x = kappa_inv(y)
    assert x >= 0
    assert kappa(x) == pytest.approx(y, rel=1e-10)


def test_kappa_inv_rejects_below_one():
    with pytest.raises(ValueError):
        kappa_inv(0.5)
    assert kappa_inv(1.0) == 0.0


def test_subgaussian_radius_reference():
    r = subgaussian_radius(0.01, 10)
    assert r == pytest.approx(math.sqrt(10 * (1 + KAPPA_INV_FROZEN[2.5118864315095801111])), abs=1e-9)
    # sub-Gaussian tails cost more than Gaussian ones
    assert r > gaussian_radius(0.01, 10)


def test_chi2_quantile_matches_scipy():
    from scipy.stats import chi2
    for p, k in ((0.99, 10), (0.9, 2), (0.5, 5)):
        assert chi2_quantile(p, k) == pytest.approx(chi2.ppf(p, k), abs=1e-8)


# -- error system --------------------------------------------------------------------

def test_error_system_matches_closed_loop_simulation(rng):
    """One closed-loop step from raw equations reproduces the block recursion."""
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    for _ in range(20):
        x, xh, z = rng.normal(size=(3, 2))
        v = rng.normal(size=1)
        w, m, eps = rng.normal(size=(3, 2))
        u = g.K @ (xh - z) + v
        x1 = A @ x + B @ u + w
        pred = A @ xh + B @ u
        xh1 = pred + g.L @ (C @ x1 + m + eps - C @ pred)
        z1 = A @ z + B @ v
        e = np.r_[xh - x, x - z]
        e1 = np.r_[xh1 - x1, x1 - z1]
        assert np.allclose(e1, es.Ae @ e + es.Be1 @ w + es.Be2 @ m + es.Be3 @ eps, atol=1e-12)
        xi = np.r_[x - z, u - v]
        assert np.allclose(xi, es.Ke @ e, atol=1e-12)


def test_literal_convention_pattern():
    n = 2
    K, L = -0.5 * np.eye(n), 0.8 * np.eye(n)
    es = assemble_error_system(np.eye(n), np.eye(n), np.eye(n), K, L, convention="literal")
    assert np.allclose(es.Ae[:n, :n], 0.2 * np.eye(n))
    assert np.allclose(es.Ae[n:, :n], 0.5 * np.eye(n))
    assert np.allclose(es.Be2[:n], -L)


def test_unstable_error_system_refused():
    with pytest.raises(StabilityError):
        assemble_error_system(np.eye(1) * 1.2, np.eye(1), np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)))


def test_variance_proxy_equals_gaussian_covariance_recursion():
    """Proxy recursion vs covariance of (x, x_hat) built column by column from the raw loop."""
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    n = 2
    Seps = np.array([[0.04, 0.01], [0.01, 0.09]])

    def step(x, xh, eps):
        u = g.K @ xh  # z = v = 0: the deterministic parts drop out of the covariance
        x1 = A @ x + B @ u
        pred = A @ xh + B @ u
        return x1, pred + g.L @ (C @ x1 + eps - C @ pred)

    F = np.zeros((2 * n, 2 * n))
    for j in range(2 * n):
        s = np.eye(2 * n)[j]
        F[:, j] = np.r_[step(s[:n], s[n:], np.zeros(n))]
    G = np.zeros((2 * n, n))
    for j in range(n):
        G[:, j] = np.r_[step(np.zeros(n), np.zeros(n), np.eye(n)[j])]
    T = np.block([[-np.eye(n), np.eye(n)], [np.eye(n), np.zeros((n, n))]])  # (x, x_hat) -> e

    sigma0 = 0.3
    Cov = sigma0 ** 2 * np.block([[np.eye(n), np.eye(n)], [np.eye(n), np.eye(n)]])  # x_hat_0 = mu0 deterministic
    Cov[n:, :] = 0.0
    Cov[:, n:] = 0.0
    Sigma = initial_proxy(n, sigma0)
    assert np.allclose(T @ Cov @ T.T, Sigma, atol=1e-15)
    for _ in range(30):
        Cov = F @ Cov @ F.T + G @ Seps @ G.T
        Sigma = propagate_variance_proxy(es, Sigma, Seps)
        assert np.max(np.abs(T @ Cov @ T.T - Sigma)) <= 1e-12


# -- bias set ------------------------------------------------------------------------

def test_bias_set_contains_simulated_error(rng):
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    W = Zonotope.symmetric_box([0.02, 0.05])
    M = Zonotope.symmetric_box([0.03, 0.01])
    budget = NoiseBudget(W, M, np.zeros((2, 2)))
    sched = build_prs_schedule(es, budget, 0.1)
    T = 40
    for _ in range(50):
        e = np.zeros(4)
        for t in range(T):
            w = rng.uniform(-1, 1, 2) * [0.02, 0.05]
            m = rng.choice([-1, 1], 2) * [0.03, 0.01]
            e = es.Ae @ e + es.Be1 @ w + es.Be2 @ m
            assert sets.contains(sched.at(t + 1), es.Ke @ e, tol=1e-7)


# -- PRS schedules --------------------------------------------------------------------

def _mc_containment(es, sched, Seps, sigma0, sampler, M_sampler, T, N, rng):
    n = es.n
    e = np.zeros((N, 2 * n))
    d0 = sampler(N, sigma0)
    e[:, :n], e[:, n:] = -d0, d0
    frac = []
    for t in range(T + 1):
        xi = e @ es.Ke.T
        frac.append(np.mean(sets.contains_many(sched.at(t), xi) == 1))
        eps = sampler(N, math.sqrt(Seps[0, 0]))
        e = e @ es.Ae.T + (M_sampler(N) + eps) @ es.Be3.T
    return np.array(frac)


def test_gaussian_prs_on_gaussian_noise_meets_level(rng):
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    Seps = 0.01 * np.eye(2)
    budget = NoiseBudget(Zonotope.zero(2), Zonotope.zero(2), Seps, sigma0=0.05)
    delta = 0.1
    sched = build_prs_schedule(es, budget, delta, method="gaussian")
    frac = _mc_containment(es, sched, Seps, 0.05, lambda N, s: rng.normal(0, s, (N, 2)),
                           lambda N: 0.0, 15, 4000, rng)
    assert frac.min() >= 1 - delta - 3 * math.sqrt(delta * (1 - delta) / 4000)


def test_ours_contains_biased_bounded_noise_zero_mean_does_not(rng):
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    s = 0.01
    Seps = s ** 2 * np.eye(2)
    M = Zonotope.symmetric_box([0.05, 0.05])
    budget = NoiseBudget(Zonotope.zero(2), M, Seps, sigma0=0.0)
    unif = lambda N, sc: rng.uniform(-1, 1, (N, 2)) * sc  # proxy sc^2/3 <= sc^2
    bias = lambda N: np.full((N, 2), 0.05)
    ours = _mc_containment(es, build_prs_schedule(es, budget, 0.05), Seps, 0.0, unif, bias, 15, 1000, rng)
    zm = _mc_containment(es, build_prs_schedule(es, budget, 0.05, method="zero_mean_subgaussian"),
                         Seps, 0.0, unif, bias, 15, 1000, rng)
    assert ours.min() == 1.0
    assert zm.min() < 0.5


def test_robust_schedule_has_no_ellipsoid_and_starts_from_box():
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    budget = NoiseBudget(Zonotope.zero(2), Zonotope.zero(2), 0.01 * np.eye(2), sigma0=0.1)
    sched = build_prs_schedule(es, budget, 0.01, method="robust", robust_k=3.0)
    assert all(e.E_xi is None for e in sched.entries)
    # x - z = x0 - mu0 lies in the box of half-width k sigma0
    assert sets.support(sched.at(0), np.r_[1.0, 0.0, 0.0]) == pytest.approx(0.3)


def test_schedule_converges_and_serialises():
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    budget = NoiseBudget(Zonotope.symmetric_box([0.01, 0.01]), Zonotope.symmetric_box([0.01, 0.01]),
                         0.01 * np.eye(2), sigma0=0.05)
    sched = build_prs_schedule(es, budget, 0.01)
    assert sched.converged
    assert sched.index(10 ** 6) == len(sched) - 1
    back = PRSSchedule.from_dict(sched.to_dict())
    for t in (0, 3, len(sched) + 5):
        assert sets.allclose(back.at(t), sched.at(t))


def test_budget_switch_changes_the_tail():
    A, B, C, g = two_state_system()
    es = assemble_error_system(A, B, C, g.K, g.L)
    small = NoiseBudget(Zonotope.symmetric_box([0.01, 0.01]), Zonotope.zero(2), 0.01 * np.eye(2))
    big = NoiseBudget(Zonotope.symmetric_box([0.05, 0.05]), Zonotope.zero(2), 0.04 * np.eye(2))
    sched = build_prs_schedule(es, [(0, small), (30, big)], 0.01)
    a = np.r_[1.0, 0.0, 0.0]
    assert len(sched) > 30
    assert sets.support(sched.at(25), a) < sets.support(sched.at(len(sched) - 1), a)


def test_delayed_measurement_schedule_is_periodic():
    A, B, C, g = two_state_system()
    systems = measurement_systems(A, B, C, g.K, g.L, every=3)
    assert len(systems) == 3
    assert np.all(systems[0].Be3 == 0) and np.any(systems[2].Be3 != 0)
    budget = NoiseBudget(Zonotope.symmetric_box([0.01, 0.01]), Zonotope.symmetric_box([0.01, 0.01]),
                         0.01 * np.eye(2), sigma0=0.05)
    sched = build_prs_schedule(systems, budget, 0.01)
    assert sched.period == 3 and sched.converged
    T = len(sched)
    for t in range(T, T + 9):
        assert sched.index(t) == sched.index(t - 3)
        assert sched.index(t) >= T - 3


def test_initial_proxy_modes():
    P = initial_proxy(2, 0.5)
    assert np.allclose(P, 0.25 * np.block([[np.eye(2), -np.eye(2)], [-np.eye(2), np.eye(2)]]))
    assert np.allclose(initial_proxy(2, 0.5, "isotropic"), 0.25 * np.eye(4))
    with pytest.raises(ValueError):
        initial_proxy(2, 0.5, "other")


def test_noise_budget_validation_and_round_trip():
    b = NoiseBudget(Zonotope.symmetric_box([0.1, 0.2]), Zonotope.symmetric_box([0.0, 0.1]), np.eye(2), 0.3,
                    [1.0, 2.0])
    back = NoiseBudget.from_dict(b.to_dict())
    assert back.sigma0 == 0.3 and np.allclose(back.mu0, [1.0, 2.0])
    with pytest.raises(ValueError):
        NoiseBudget(Zonotope.box([0.1, 0.1], [0.2, 0.2]), Zonotope.zero(2), np.eye(2))
    with pytest.raises(ValueError):
        NoiseBudget(Zonotope.zero(2), Zonotope.zero(2), -np.eye(2))
