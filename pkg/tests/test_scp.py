import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftsafe import conic, scp, uq
from driftsafe import dynamics as dyn

CTX = dyn.OrbitContext.from_semimajor_axis(6738e3, 398600.4418e9)


def _psd2(a, b, rho):
    return np.array([[a * a, rho * a * b], [rho * a * b, b * b]])


psd2 = st.builds(_psd2, st.floats(0.1, 100.0), st.floats(0.1, 100.0), st.floats(-0.99, 0.99))


# --- reference and chance constraint -------------------------------------


def test_initial_reference_examples():
    r, dxi = scp.initial_reference([0.0, 0.0], [2000.0, 2000.0], 7200.0, 3)
    np.testing.assert_allclose(r, [[0, 0], [1000, 1000], [2000, 2000]])
    assert dxi == 3600.0
    r, dxi = scp.initial_reference([-1.0, 5.0], [3.0, -7.0], 7200.0, 5)
    assert dxi == 1800.0
    np.testing.assert_array_equal(r[0], [-1.0, 5.0])
    np.testing.assert_array_equal(r[-1], [3.0, -7.0])


def test_chi2_radius():
    assert scp.chi2_radius(0.99) ** 2 == pytest.approx(9.2103, abs=1e-3)
    assert scp.chi2_radius(1 - np.exp(-4.5)) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        scp.chi2_radius(1.0)


@settings(max_examples=100, deadline=None)
@given(beta=st.floats(1e-6, 1 - 1e-9))
def test_chi2_radius_matches_scipy_quantile(beta):
    from scipy.stats import chi2

    assert scp.chi2_radius(beta) ** 2 == pytest.approx(chi2.ppf(beta, 2), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(S=psd2, c=st.floats(0.5, 5.0))
def test_buffer_radius_is_scaled_largest_sigma(S, c):
    assert scp.buffer_radius(S, c) == pytest.approx(c * np.sqrt(np.linalg.eigvalsh(S)[-1]), rel=1e-9)


def test_buffer_containment_random_covariances():
    rng = np.random.default_rng(17)
    c = scp.chi2_radius(0.99)
    for _ in range(20):
        A = rng.standard_normal((2, 2)) * rng.uniform(1, 100)
        S = A @ A.T
        x = rng.multivariate_normal(np.zeros(2), S, size=100000)
        outside = np.mean(np.linalg.norm(x, axis=1) > scp.buffer_radius(S, c))
        assert outside <= 0.012


def test_chance_config_grids():
    ch = scp.ChanceConfig(r_kos=150.0, t_safe=3600.0, gamma=600.0, gamma_verify=60.0)
    assert ch.grid().size == 7 and ch.dense_grid().size == 61
    with pytest.raises(ValueError):
        scp.ChanceConfig(r_kos=-1.0)


# --- subproblem ----------------------------------------------------------


def _vbar_problem(N=3):
    r = np.array([0.0, 1000.0])
    return scp.TransferProblem(CTX, r, np.zeros(2), r, np.zeros(2), N)


def test_stationary_vbar_needs_no_control():
    prob = _vbar_problem()
    cfg = scp.ScpConfig(tf0=3600.0)
    ch = scp.ChanceConfig(r_kos=150.0, t_safe=3600.0)
    ref = scp._reference_from_line(prob, cfg)
    buf = scp.BufferField.zeros(prob.n_nodes - 1, ch.grid())
    for stage in (scp.INIT, scp.SCVX):
        P, lay = scp.build_subproblem(ref, buf, prob, cfg, ch, stage)
        sol = conic.solve(P)
        assert sol.ok
        traj, _ = scp._extract(sol, lay, ref)
        assert traj.total_dv < 1e-7


def test_linearized_keep_out_is_exact_at_reference():
    prob = scp.TransferProblem(CTX, [-1400.0, -7500.0], [0.0, 2.397], [0.0, 750.0], [0.0, 0.0], 4)
    ref = scp._reference_from_line(prob, scp.ScpConfig(tf0=7200.0))
    taus = uq.drift_grid(3600.0, 600.0)
    buf = scp.BufferField(taus, np.full((3, taus.size), 25.0))
    A, rhs = scp._kos_rows(ref, buf, 150.0)
    for k in range(3):
        for j, tau in enumerate(taus):
            pos = dyn.stm(tau, CTX)[:2] @ ref.X[k]
            assert A[k, j] @ ref.X[k] == pytest.approx(np.linalg.norm(pos), rel=1e-12)
    assert np.all(rhs == 175.0)


def test_degenerate_linearization_at_origin():
    prob = scp.TransferProblem(CTX, [0.0, 0.0], [0.0, 0.0], [0.0, 750.0], [0.0, 0.0], 3)
    ref = scp._reference_from_line(prob, scp.ScpConfig(tf0=3600.0))
    buf = scp.BufferField.zeros(2, [0.0])
    with pytest.raises(scp.DegenerateLinearizationError):
        scp.build_subproblem(ref, buf, prob, scp.ScpConfig(), scp.ChanceConfig(r_kos=150.0), scp.INIT)


@pytest.mark.parametrize("objective", [scp.MIN_FUEL, scp.MIN_TIME])
def test_trust_region_bounds(objective):
    prob = scp.TransferProblem(CTX, [-1400.0, -7500.0], [0.0, 2.397], [0.0, 750.0], [0.0, 0.0], 4)
    cfg = scp.ScpConfig(objective=objective, tf0=5400.0, phi=0.1)
    ch = scp.ChanceConfig(r_kos=150.0, t_safe=1800.0)
    ref = scp._reference_from_line(prob, cfg)
    buf = scp.BufferField.zeros(3, ch.grid())
    P, lay = scp.build_subproblem(ref, buf, prob, cfg, ch, scp.SCVX)
    sol = conic.solve(P)
    assert sol.ok
    traj, _ = scp._extract(sol, lay, ref)
    ratio = traj.dt / ref.dt
    assert np.all(ratio >= 0.9 - 1e-7) and np.all(ratio <= 1.1 + 1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        scp.ScpConfig(objective="comfort")
    with pytest.raises(ValueError):
        scp.ScpConfig(tf_fixed=True)
    with pytest.raises(ValueError):
        scp.TransferProblem(CTX, [0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], 3)
    with pytest.raises(ValueError):
        scp.TransferProblem(CTX, [0.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], 1)


# --- converged solutions -------------------------------------------------

RESULTS = ["control_result", "min_fuel_result", "min_time_result", "zero_buffer_result"]


@pytest.mark.parametrize("name", RESULTS)
def test_dynamics_residuals(name, request):
    res = request.getfixturevalue(name)
    assert res.converged
    rp, rv = res.trajectory.residuals()
    assert rp < 1e-6 and rv < 1e-9


@pytest.mark.parametrize("name", RESULTS[:3])
def test_dense_grid_keep_out(name, request):
    res = request.getfixturevalue(name)
    ch = res.chance
    disp = request.getfixturevalue("table_scenario").dispersion
    dense = ch.dense_grid()
    buf = scp.compute_buffers(res.trajectory, disp, dense, ch.c)
    assert scp.drift_clearance(res.trajectory, buf, ch.r_kos).min() > -1e-6
    assert res.safety.passed


@pytest.mark.parametrize("name", RESULTS)
def test_accepted_iterations_never_raise_the_merit(name, request):
    res = request.getfixturevalue(name)
    acc = [h for h in res.history if h.accepted and h.stage == scp.SCVX]
    assert acc
    for h in acc:
        assert h.merit <= h.baseline + 1e-9 * abs(h.baseline)
        assert h.max_dt_change <= h.phi * (1 + 1e-6)


def test_trust_region_in_history(min_time_result):
    steps = [h for h in min_time_result.history if h.stage == scp.SCVX and h.accepted and h.max_dt_change > 0]
    assert steps and all(h.max_dt_change <= 0.1 + 1e-6 for h in steps)


def test_zero_buffer_optimum_is_cheaper(zero_buffer_result, min_fuel_result):
    assert zero_buffer_result.trajectory.total_dv <= min_fuel_result.trajectory.total_dv + 1e-6


def test_min_fuel_beats_control(control_result, min_fuel_result):
    assert min_fuel_result.trajectory.total_dv < control_result.trajectory.total_dv


def test_min_time_respects_caps(min_time_result):
    t = min_time_result.trajectory
    assert t.total_dv <= min_time_result.cfg.dv_max * (1 + 1e-6)
    assert t.tf <= min_time_result.cfg.tf_max * (1 + 1e-9)


def test_control_flies_prescribed_waypoints(control_result, table_scenario):
    X = control_result.trajectory.X
    for wp, k in zip(table_scenario.waypoints[1:3], (1, 2)):
        np.testing.assert_allclose(X[k, :2], wp.state[:2], atol=1e-6)
    assert control_result.trajectory.tf == pytest.approx(7200.0, rel=1e-9)


# --- safety grid refinement ---------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    x=st.lists(st.floats(-3000, 3000), min_size=2, max_size=2),
    v=st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=2),
    sig=st.floats(1.0, 200.0),
    t_safe=st.floats(600.0, 20000.0),
    gamma=st.floats(30.0, 1200.0),
    r_kos=st.floats(10.0, 500.0),
)
def test_halving_gamma_never_turns_fail_into_pass(x, v, sig, t_safe, gamma, r_kos):
    state = np.r_[x, v]
    P = np.diag([sig**2, sig**2, (sig * 1e-3) ** 2, (sig * 1e-3) ** 2])

    def verdict(g):
        env = uq.free_drift_envelope([state], [P], uq.drift_grid(t_safe, g), CTX)
        return uq.verify_drift_safety(env, r_kos, 3.0).passed

    if not verdict(gamma):
        assert not verdict(gamma / 2)


# --- driver --------------------------------------------------------------


def _primer_peak(x_i, r_f, tof):
    """Largest primer-vector norm along the two-impulse arc (<= 1: two burns are optimal)."""
    corr = uq.lambert_correct(np.r_[x_i[:2], 0, x_i[2:], 0], [*r_f, 0], tof, CTX)
    u1 = corr.dv1[:2] / np.linalg.norm(corr.dv1[:2])
    u2 = corr.dv2_projected[:2] / np.linalg.norm(corr.dv2_projected[:2])
    Phi = dyn.stm(tof, CTX)
    nu_r = np.linalg.solve(Phi[:2, 2:].T, u1 - Phi[2:, 2:].T @ u2)
    peak = 0.0
    for t in np.linspace(0.0, tof, 400):
        P = dyn.stm(tof - t, CTX)
        peak = max(peak, float(np.linalg.norm(P[:2, 2:].T @ nu_r + P[2:, 2:].T @ u2)))
    lam = float(np.linalg.norm(corr.dv1) + np.linalg.norm(corr.dv2_projected))
    return peak, lam


def test_two_burn_sufficient_transfer_plateaus():
    x_i = np.array([-1000.0, -8000.0, 0.0, 1.5 * CTX.n * 1000.0])
    r_f = np.array([0.0, -4000.0])
    tof = 2400.0
    peak, lambert = _primer_peak(x_i, r_f, tof)
    assert peak <= 1.0 + 1e-9  # precondition: extra burns cannot help
    prob = scp.TransferProblem(CTX, x_i[:2], x_i[2:], r_f, [0.0, 0.0], 2)
    ch = scp.ChanceConfig(r_kos=150.0, t_safe=1800.0)
    cfg = scp.ScpConfig(tf0=tof, tf_max=tof, tf_fixed=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gs = scp.grid_search_burn_count(prob, cfg, ch, None, [2, 3, 4])
    for N in (2, 3, 4):
        assert gs.table[N]["total_dv_mps"] == pytest.approx(lambert, rel=1e-6)
    assert all(gs.best.objective <= row["objective"] + 1e-12 for row in gs.table.values())
    assert gs.best.problem.n_nodes == 2  # ties go to the smaller N


def test_grid_search_finds_extra_burn_when_primer_exceeds_one():
    # SCP is local: a single N can stall at the two-impulse stationary point,
    # but the search over burn counts must find the cheaper multi-burn arc
    x_i = np.array([-1000.0, -8000.0, 0.0, 1.5 * CTX.n * 1000.0])
    r_f = np.array([0.0, -4000.0])
    peak, lambert = _primer_peak(x_i, r_f, 3000.0)
    assert peak > 1.0
    prob = scp.TransferProblem(CTX, x_i[:2], x_i[2:], r_f, [0.0, 0.0], 2)
    cfg = scp.ScpConfig(tf0=3000.0, tf_max=3000.0, tf_fixed=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gs = scp.grid_search_burn_count(prob, cfg, scp.ChanceConfig(r_kos=150.0, t_safe=1800.0), None, [2, 3, 4])
    assert gs.table[2]["total_dv_mps"] == pytest.approx(lambert, rel=1e-6)
    assert gs.best.trajectory.total_dv < lambert - 1e-3
    assert all(row["total_dv_mps"] <= lambert * (1 + 1e-6) for row in gs.table.values())


def test_grid_search_single_value_matches_solve(table_scenario):
    sc = table_scenario
    prob = sc.transfer_problem(4)
    cfg = scp.ScpConfig(tf0=7200.0, tf_max=7200.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        one = scp.solve_scp(prob, cfg, sc.chance, sc.dispersion)
        gs = scp.grid_search_burn_count(prob, cfg, sc.chance, sc.dispersion, [4])
    assert gs.best.trajectory.total_dv == pytest.approx(one.trajectory.total_dv, rel=1e-12)
    with pytest.raises(ValueError):
        scp.grid_search_burn_count(prob, cfg, sc.chance, sc.dispersion, [])


def test_infeasible_start_is_reported():
    prob = scp.TransferProblem(CTX, [0.0, 100.0], [0.0, 0.0], [0.0, 750.0], [0.0, 0.0], 3)
    with pytest.raises(scp.InfeasibleError) as err:
        scp.solve_scp(prob, scp.ScpConfig(), scp.ChanceConfig(r_kos=150.0, t_safe=600.0), None)
    assert err.value.report["stage"] == "initial"


def test_iteration_callback_and_json(table_scenario):
    sc = table_scenario
    seen = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scp.solve_scp(sc.transfer_problem(3), scp.ScpConfig(tf0=7200.0, tf_max=7200.0), sc.chance, None, seen.append)
    assert seen and seen[0].stage == scp.INIT
    assert '"objective"' in seen[-1].to_json()
