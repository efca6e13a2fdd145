import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftsafe import dynamics as dyn
from driftsafe import stochastics as sto
from driftsafe import uq

CTX = dyn.OrbitContext.from_semimajor_axis(6738e3, 398600.4418e9)

vec3 = st.lists(st.floats(-5e3, 5e3), min_size=3, max_size=3).map(np.array)
vel3 = st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3).map(np.array)


def _small_plan():
    wps = [
        uq.Waypoint("A", [-1000.0, -3000.0, 0.0, 0.0, 1.5 * CTX.n * 1000.0, 0.0]),
        uq.Waypoint("B", [0.0, -800.0, 0.0, 0.0, 0.0, 0.0], transfer_time=1800.0, hold_time=600.0),
        uq.Waypoint("C", [0.0, -300.0, 0.0, 0.0, 0.0, 0.0], transfer_time=2400.0),
    ]
    return uq.two_impulse_plan(wps, CTX)


def _small_dispersion(scale=1.0):
    return uq.DispersionConfig(
        P_x0=sto.isotropic_covariance(60.0 * scale, 0.06 * scale),
        nav=sto.NavProfile(
            [0.0, 3000.0],
            [sto.isotropic_covariance(90.0 * scale, 0.09 * scale), sto.isotropic_covariance(15.0 * scale, 0.015 * scale)],
            tau=1800.0,
        ),
        gates=sto.GatesParams(2e-3, 3e-4, 3e-4 * scale, 3e-4 * scale),
    )


def test_propagate_covariance_matches_sampled_states():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((6, 6))
    P = A @ A.T * np.diag([1e4] * 3 + [1e-2] * 3)
    P = 0.5 * (P + P.T) + np.diag([1e3] * 3 + [1e-3] * 3)
    x = sto.nav_error(rng.standard_normal((200000, 6)), P)
    Phi = dyn.stm(1500.0, CTX, dyn.FULL3D)
    S = np.cov(x @ Phi.T, rowvar=False)
    Q = uq.propagate_covariance(P, 1500.0, CTX)
    W = np.linalg.inv(np.linalg.cholesky(Q))
    assert np.abs(W @ S @ W.T - np.eye(6)).max() < 0.02


@settings(max_examples=40, deadline=None)
@given(r=vec3, v=vel3, target=vec3, tof=st.floats(300.0, 5000.0))
def test_lambert_hits_target(r, v, target, tof):
    x = np.r_[r, v]
    corr = uq.lambert_correct(x, target, tof, CTX)
    arrive = dyn.propagate(dyn.propagate(x, 0.0, CTX, corr.dv1), tof, CTX)
    np.testing.assert_allclose(arrive[:3], target, atol=1e-6 * (1 + np.abs(target).max()))
    np.testing.assert_allclose(arrive[3:] + corr.dv2_projected, 0.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(x1=vec3, x2=vec3, a=st.floats(-3, 3), tof=st.floats(300.0, 5000.0))
def test_lambert_correction_is_affine(x1, x2, a, tof):
    target = np.array([0.0, -500.0, 0.0])
    s1, s2 = np.r_[x1, 0, 0, 0], np.r_[x2, 0.1, -0.2, 0]

    def dv(s):
        return uq.lambert_correct(s, target, tof, CTX).dv1

    lhs = dv(s1 + a * (s2 - s1))
    rhs = dv(s1) + a * (dv(s2) - dv(s1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_lambert_singular_transfer():
    with pytest.raises(uq.SingularTransferError):
        uq.lambert_correct(np.zeros(6), [0.0, 100.0, 0.0], CTX.period, CTX)


def test_two_impulse_plan_flies_waypoints():
    plan = _small_plan()
    assert [b.label for b in plan.burns] == ["Leave A", "Arrive at B", "Leave B", "Arrive at C"]
    np.testing.assert_allclose(plan.times, [0.0, 1800.0, 2400.0, 4200.0])
    for wp, t in [(plan.waypoints[1], 1800.0), (plan.waypoints[2], 4200.0)]:
        pre, post = plan.nominal_states(CTX)
        j = int(np.flatnonzero(plan.times == t)[0])
        np.testing.assert_allclose(post[j], wp.state, atol=1e-8)
    with pytest.raises(ValueError):
        uq.two_impulse_plan(plan.waypoints[:1], CTX)


def test_zero_dispersion_gives_zero_covariance():
    res = uq.closed_loop_dispersion(_small_plan(), uq.DispersionConfig.zero(), CTX, dt_out=300.0)
    assert all(np.abs(r.P).max() < 1e-18 for r in res.history)
    assert res.total_stats.std == pytest.approx(0.0, abs=1e-12)


def test_lincov_matches_independent_monte_carlo():
    plan = _small_plan()
    cfg = _small_dispersion()
    lc = uq.closed_loop_dispersion(plan, cfg, CTX)
    mc = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=4000, seed=99)
    for Pl, Pm in zip(lc.post_burn, mc.post_burn):
        tl, tm = np.trace(Pl[:3, :3]), np.trace(Pm[:3, :3])
        assert abs(tm / tl - 1) < 0.1


def test_lincov_dv_statistics_in_the_linear_regime():
    # LinCov linearizes |dv| about the nominal burn, which holds while the
    # correction spread is small next to each burn
    plan = _small_plan()
    cfg = _small_dispersion(0.1)
    lc = uq.closed_loop_dispersion(plan, cfg, CTX)
    mc = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=4000, seed=99)
    for sl, sm in zip(lc.burn_stats, mc.burn_stats):
        assert sm.mean == pytest.approx(sl.mean, rel=0.01)
        assert sm.std == pytest.approx(sl.std, rel=0.1)
    assert mc.total_stats.std == pytest.approx(lc.total_stats.std, rel=0.1)


def test_hybrid_agrees_with_lincov_on_state_covariance():
    plan = _small_plan()
    cfg = _small_dispersion()
    lc = uq.closed_loop_dispersion(plan, cfg, CTX)
    hy = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.HYBRID, trials=3000, seed=4)
    for Pl, Ph in zip(lc.post_burn, hy.post_burn):
        assert np.trace(Ph[:3, :3]) == pytest.approx(np.trace(Pl[:3, :3]), rel=0.1)


def test_monte_carlo_is_seeded_and_worker_invariant():
    plan = _small_plan()
    cfg = _small_dispersion()
    a = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=64, seed=2**63 + 5, workers=1)
    b = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=64, seed=2**63 + 5, workers=3)
    c = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=64, seed=6, workers=1)
    assert np.array_equal(a.trials.states, b.trials.states)
    assert np.array_equal(a.trials.dv, b.trials.dv)
    assert not np.array_equal(a.trials.dv, c.trials.dv)


def test_monte_carlo_prefix_is_stable():
    # trial i depends only on (seed, i), not on the ensemble size
    plan = _small_plan()
    cfg = _small_dispersion()
    a = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=10, seed=1)
    b = uq.closed_loop_dispersion(plan, cfg, CTX, mode=uq.MONTECARLO, trials=25, seed=1)
    assert np.array_equal(a.trials.dv, b.trials.dv[:10])


def test_bad_mode_and_empty_plan():
    with pytest.raises(ValueError):
        uq.closed_loop_dispersion(_small_plan(), _small_dispersion(), CTX, mode="bootstrap")
    with pytest.raises(ValueError):
        uq.closed_loop_dispersion(uq.ManeuverPlan(np.zeros(6), []), _small_dispersion(), CTX)


@settings(max_examples=50, deadline=None)
@given(t_safe=st.floats(1.0, 1e5), gamma=st.floats(1.0, 5e3))
def test_drift_grid(t_safe, gamma):
    g = uq.drift_grid(t_safe, gamma)
    assert g[0] == 0.0 and g[-1] == pytest.approx(t_safe)
    assert len(g) <= 1 + int(np.ceil(t_safe / gamma))
    assert np.diff(g).max() <= gamma * (1 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(t_safe=st.floats(1.0, 1e5), gamma=st.floats(1.0, 5e3))
def test_halved_grid_contains_grid(t_safe, gamma):
    coarse, fine = uq.drift_grid(t_safe, gamma), uq.drift_grid(t_safe, gamma / 2)
    i = np.clip(np.searchsorted(fine, coarse), 1, fine.size - 1)
    gap = np.minimum(np.abs(fine[i] - coarse), np.abs(fine[i - 1] - coarse))
    assert np.all(gap <= 1e-9 * t_safe)


def test_circumscribing_radius():
    P = np.array([[9.0, 0.0], [0.0, 4.0]])
    assert uq.circumscribing_radius(P, 3.0) == pytest.approx(9.0)


def test_drift_envelope_is_propagated_covariance():
    P = np.diag([100.0, 400.0, 0.01, 0.01])
    x = np.array([0.0, 1000.0, 0.0, 0.0])
    env = uq.free_drift_envelope([x], [P], [0.0, 900.0], CTX)
    assert len(env) == 2
    np.testing.assert_allclose(env[1].cov, uq.propagate_covariance(P, 900.0, CTX))
    np.testing.assert_allclose(env[1].mean, x)


def test_safety_verdict_and_inflated_keep_out():
    x = np.array([0.0, 1000.0, 0.0, 0.0])
    env = uq.free_drift_envelope([x], [np.diag([100.0, 100.0, 0, 0])], [0.0], CTX)
    ok = uq.verify_drift_safety(env, 150.0, 3.0)
    assert ok.passed and ok.min_clearance == pytest.approx(1000.0 - 150.0 - 30.0)
    bad = uq.verify_drift_safety(env, 980.0, 3.0)
    assert not bad.passed and bad.summary()["worst_node"] == 0


def test_plan_drift_nodes_skip_last_burn(table_scenario, table_plan, table_lincov):
    states, covs = uq.plan_drift_nodes(table_plan, table_lincov, table_scenario.ctx)
    assert len(states) == len(table_plan.burns) == len(covs)
    np.testing.assert_array_equal(states[0], table_plan.x0)
