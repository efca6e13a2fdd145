"""Closed-loop dispersion analysis for impulsive rendezvous plans.

The closed loop is a linearized two-burn Lambert correction applied at
every nominal burn time: burn ``j`` retargets the nav-estimated state to
the nominal position at burn ``j + 1``; the final burn only matches the
nominal final velocity.

Three engines share one error model:

``lincov``
    Exact covariance propagation of an augmented linear state
    ``[dispersion(6), nav ECRV(6), Gates ECRV(8), dv deviation(1)]``.
``hybrid``
    Same covariance propagation, but at every burn the augmented state
    is sampled, the nonlinear burn (actual corrective Lambert solve and
    Gates sampling on the commanded burn) is applied to the samples and
    the mean/covariance are re-estimated.
``montecarlo``
    Independent trials stepped on a time grid with per-trial random
    substreams keyed by ``(seed, trial)``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .stochastics import (
    ZERO_BURN_MPS,
    GatesParams,
    NavProfile,
    ecrv_coefficients,
    gates_sample,
    psd_sqrt,
)

log = logging.getLogger(__name__)

LINCOV, HYBRID, MONTECARLO = "lincov", "hybrid", "montecarlo"
MODES = (LINCOV, HYBRID, MONTECARLO)

# augmented LinCov layout
IX = slice(0, 6)
IZ = slice(6, 12)
IG = slice(12, 20)
IS = 20
NAUG = 21


class SingularTransferError(ValueError):
    """The position/velocity block of the STM cannot be inverted."""


# --------------------------------------------------------------------------
# Plans
# --------------------------------------------------------------------------


@dataclass
class Burn:
    t: float
    dv: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.t = float(self.t)
        self.dv = np.asarray(self.dv, dtype=float).reshape(3)

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.dv))


@dataclass
class Waypoint:
    """A row of a waypoint table.

    ``transfer_time`` is measured from the previous waypoint's arrival and
    includes the hold there; ``hold_time`` is free drift after arrival.
    """

    label: str
    state: np.ndarray
    transfer_time: float = 0.0
    hold_time: float = 0.0

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).reshape(6)


@dataclass
class ManeuverPlan:
    """Initial state at t = 0 plus a time-ordered list of impulsive burns."""

    x0: np.ndarray
    burns: list[Burn]
    waypoints: list[Waypoint] = field(default_factory=list)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(6)
        times = [b.t for b in self.burns]
        if times and times[0] < 0:
            raise ValueError("first burn time must be non-negative")
        if np.any(np.diff(times) <= 0):
            raise ValueError("burn times must be strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return np.array([b.t for b in self.burns])

    @property
    def total_dv(self) -> float:
        return float(sum(b.magnitude for b in self.burns))

    def nominal_states(self, ctx: dyn.OrbitContext) -> tuple[np.ndarray, np.ndarray]:
        """Pre- and post-burn nominal states, each ``(n_burns, 6)``."""
        pre, post = [], []
        x, t = self.x0.copy(), 0.0
        for b in self.burns:
            x = dyn.propagate(x, b.t - t, ctx)
            pre.append(x.copy())
            x[3:] += b.dv
            post.append(x.copy())
            t = b.t
        return np.array(pre).reshape(-1, 6), np.array(post).reshape(-1, 6)

    def state_at(self, t: float, ctx: dyn.OrbitContext) -> np.ndarray:
        """Nominal state at ``t`` (a burn at exactly ``t`` counts as applied)."""
        x, tp = self.x0.copy(), 0.0
        for b in self.burns:
            if b.t > t:
                break
            x = dyn.propagate(x, b.t - tp, ctx, b.dv)
            tp = b.t
        return dyn.propagate(x, t - tp, ctx)


@dataclass
class LambertCorrection:
    dv1: np.ndarray
    dv2_projected: np.ndarray


def _check_transfer(Phi_rv: np.ndarray, tof: float, n: float) -> None:
    d = abs(np.linalg.det(n * Phi_rv))
    if not np.isfinite(d) or d < 1e-12:
        raise SingularTransferError(
            f"transfer of {tof:.3f} s is singular (|det(n*Phi_rv)| = {d:.2e})"
        )


def lambert_correct(nav_state, target_pos, tof: float, ctx: dyn.OrbitContext, target_vel=None) -> LambertCorrection:
    """Linearized two-burn correction from an estimated state.

    Works for planar (4) or 3-D (6) states. ``dv2_projected`` is the
    arrival burn needed to match ``target_vel`` (zero if omitted); it is
    only a projection and is never applied by the closed loop.
    """
    x = np.asarray(nav_state, dtype=float)
    d = x.size // 2
    mode = dyn.PLANAR if x.size == 4 else dyn.FULL3D
    Prr, Prv, Pvr, Pvv = dyn.stm_blocks(tof, ctx, mode)
    _check_transfer(Prv, tof, ctx.n)
    r_hat, v_hat = x[:d], x[d:]
    v_plus = np.linalg.solve(Prv, np.asarray(target_pos, dtype=float) - Prr @ r_hat)
    dv1 = v_plus - v_hat
    v_star = np.zeros(d) if target_vel is None else np.asarray(target_vel, dtype=float)
    dv2 = v_star - (Pvr @ r_hat + Pvv @ v_plus)
    return LambertCorrection(dv1=dv1, dv2_projected=dv2)


def two_impulse_plan(waypoints: list[Waypoint], ctx: dyn.OrbitContext) -> ManeuverPlan:
    """Reconstruct the nominal burn schedule that flies a waypoint table.

    The chaser starts at the first waypoint at t = 0, drifts through each
    hold, and leaves every waypoint on the Lambert arc to the next
    waypoint's position. A waypoint with a nonzero hold is entered with an
    arrival burn that matches its tabulated velocity; with zero hold the
    arrival and departure burns merge. The last waypoint always gets an
    arrival burn.
    """
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    burns: list[Burn] = []
    x = waypoints[0].state.copy()
    t_arrive = 0.0
    for j, wp in enumerate(waypoints[:-1]):
        nxt = waypoints[j + 1]
        if j > 0 and wp.hold_time > 0:
            dv = wp.state[3:] - x[3:]
            burns.append(Burn(t_arrive, dv, f"Arrive at {wp.label}"))
            x = wp.state.copy()
        x = dyn.propagate(x, wp.hold_time, ctx)
        t_depart = t_arrive + wp.hold_time
        tof = nxt.transfer_time - wp.hold_time
        if tof <= 0:
            raise ValueError(f"transfer to {nxt.label} is shorter than the hold at {wp.label}")
        dv = lambert_correct(x, nxt.state[:3], tof, ctx).dv1
        label = f"Leave {wp.label}" if j == 0 or wp.hold_time > 0 else f"Depart {wp.label}"
        burns.append(Burn(t_depart, dv, label))
        x = dyn.propagate(dyn.propagate(x, 0.0, ctx, dv), tof, ctx)
        t_arrive = t_depart + tof
    last = waypoints[-1]
    burns.append(Burn(t_arrive, last.state[3:] - x[3:], f"Arrive at {last.label}"))
    return ManeuverPlan(x0=waypoints[0].state.copy(), burns=burns, waypoints=list(waypoints))


# --------------------------------------------------------------------------
# Configuration and results
# --------------------------------------------------------------------------


@dataclass
class DispersionConfig:
    P_x0: np.ndarray
    nav: NavProfile
    gates: GatesParams = field(default_factory=GatesParams)
    gates_tau: float = 0.0  # 0: burn-to-burn uncorrelated; >0 ECRV-correlated
    confidence: float = 3.0
    hybrid_samples: int = 2000

    def __post_init__(self):
        self.P_x0 = np.asarray(self.P_x0, dtype=float).reshape(6, 6)
        psd_sqrt(self.P_x0, "initial dispersion covariance")

    @classmethod
    def zero(cls) -> "DispersionConfig":
        return cls(P_x0=np.zeros((6, 6)), nav=NavProfile.zero())


@dataclass
class CovarianceRecord:
    t: float
    P: np.ndarray
    tag: str  # initial | coast | pre-burn | post-burn


@dataclass
class DvStats:
    mean: float
    std: float
    p50: float
    p99: float
    samples: np.ndarray | None = None

    @classmethod
    def from_samples(cls, x) -> "DvStats":
        x = np.asarray(x, dtype=float)
        return cls(
            mean=float(x.mean()),
            std=float(x.std(ddof=1)) if x.size > 1 else 0.0,
            p50=float(np.percentile(x, 50)),
            p99=float(np.percentile(x, 99)),
            samples=x,
        )

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "DvStats":
        return cls(mean=mean, std=std, p50=mean, p99=mean + 2.3263478740408408 * std)

    def to_dict(self, bins: int = 40) -> dict:
        out = {"mean": self.mean, "std": self.std, "p50": self.p50, "p99": self.p99}
        if self.samples is not None and self.samples.size:
            counts, edges = np.histogram(self.samples, bins=bins)
            out["histogram"] = {"edges": edges.tolist(), "counts": counts.tolist()}
        return out


@dataclass
class TrialEnsemble:
    times: np.ndarray  # (T,)
    states: np.ndarray  # (trials, T, 6) true states, post-burn at burn times
    nav_errors: np.ndarray  # (trials, T, 6)
    nav_sigma: np.ndarray  # (T, 6) nav 1-sigma per component
    pre_burn: np.ndarray  # (trials, n_burns, 6) true dispersions
    post_burn: np.ndarray  # (trials, n_burns, 6)
    dv: np.ndarray  # (trials, n_burns, 3) delivered burns


@dataclass
class DispersionResult:
    mode: str
    history: list[CovarianceRecord]
    burn_stats: list[DvStats]
    total_stats: DvStats
    trials: TrialEnsemble | None = None

    def at_burns(self, tag: str) -> list[np.ndarray]:
        return [r.P for r in self.history if r.tag == tag]

    @property
    def pre_burn(self) -> list[np.ndarray]:
        return self.at_burns("pre-burn")

    @property
    def post_burn(self) -> list[np.ndarray]:
        return self.at_burns("post-burn")


# --------------------------------------------------------------------------
# LinCov machinery
# --------------------------------------------------------------------------


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def propagate_covariance(P, dt: float, ctx: dyn.OrbitContext) -> np.ndarray:
    """Phi(dt) P Phi(dt)^T for 4x4 or 6x6 covariances, symmetrized."""
    P = np.asarray(P, dtype=float)
    mode = dyn.PLANAR if P.shape[0] == 4 else dyn.FULL3D
    Phi = dyn.stm(dt, ctx, mode)
    return _sym(Phi @ P @ Phi.T)


def _cross(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def gates_input_matrix(dv_nom, p: GatesParams) -> np.ndarray:
    """3x8 matrix G with Gates error = G @ draws at fixed nominal burn.

    ``G @ G.T`` equals :func:`~driftsafe.stochastics.gates_covariance`.
    """
    dv = np.asarray(dv_nom, dtype=float)
    mag = np.linalg.norm(dv)
    if mag < ZERO_BURN_MPS:
        return np.zeros((3, 8))
    u = dv / mag
    return np.hstack(
        [
            p.sigma_s * dv[:, None],
            -p.sigma_p * _cross(dv),
            p.sigma_r * u[:, None],
            -p.sigma_a * _cross(u),
        ]
    )


@dataclass
class _BurnModel:
    """Linear pieces of the closed-loop burn at one nominal burn time."""

    t: float
    dv_nom: np.ndarray
    target_pos: np.ndarray | None  # None: final (velocity-only) burn
    target_vel: np.ndarray
    K: np.ndarray | None  # Phi_rv^-1 Phi_rr
    Phi_rv_inv: np.ndarray | None
    Phi_rr: np.ndarray | None
    S: np.ndarray  # nav covariance square root
    G: np.ndarray  # Gates input matrix

    @property
    def unit(self) -> np.ndarray:
        m = np.linalg.norm(self.dv_nom)
        return self.dv_nom / m if m >= ZERO_BURN_MPS else np.zeros(3)

    def dv_jacobian(self) -> np.ndarray:
        """d(commanded dv)/d(augmented state) excluding Gates (3 x NAUG)."""
        H = np.zeros((3, NAUG))
        H[:, 3:6] = -np.eye(3)
        H[:, IZ] = -self.S[3:]
        if self.K is not None:
            H[:, 0:3] = -self.K
            H[:, IZ] -= self.K @ self.S[:3]
        return H

    def transition(self) -> tuple[np.ndarray, np.ndarray]:
        """Augmented burn map F and the dv Jacobian including Gates."""
        H = self.dv_jacobian()
        H[:, IG] = self.G
        F = np.eye(NAUG)
        F[3:6, :] += H  # post-burn velocity dispersion = pre + commanded deviation + Gates
        F[IS, :] += self.unit @ H
        return F, H


def _correction_gains(tof: float, ctx: dyn.OrbitContext) -> tuple[np.ndarray, np.ndarray]:
    """``(Phi_rr, pinv(Phi_rv))`` for the closed-loop retarget over ``tof``.

    In-plane and cross-track channels decouple. A singular in-plane block
    is an error; a singular cross-track block (half-period transfer) makes
    cross-track position uncontrollable, and the pseudo-inverse then
    simply nulls the cross-track velocity.
    """
    Prr, Prv, _, _ = dyn.stm_blocks(tof, ctx, dyn.FULL3D)
    ip = [0, 1]
    _check_transfer(Prv[np.ix_(ip, ip)], tof, ctx.n)
    inv = np.zeros((3, 3))
    inv[np.ix_(ip, ip)] = np.linalg.inv(Prv[np.ix_(ip, ip)])
    zz = Prv[2, 2] * ctx.n  # sin(n tof)
    inv[2, 2] = 1.0 / Prv[2, 2] if abs(zz) > 1e-9 else 0.0
    return Prr, inv


def _burn_models(plan: ManeuverPlan, cfg: DispersionConfig, ctx: dyn.OrbitContext) -> list[_BurnModel]:
    pre, post = plan.nominal_states(ctx)
    models = []
    m = len(plan.burns)
    for j, b in enumerate(plan.burns):
        S = cfg.nav.sqrt(b.t)
        G = gates_input_matrix(b.dv, cfg.gates)
        if j < m - 1:
            tof = plan.burns[j + 1].t - b.t
            Prr, Prv_inv = _correction_gains(tof, ctx)
            models.append(_BurnModel(b.t, b.dv, pre[j + 1][:3], post[j][3:], Prv_inv @ Prr, Prv_inv, Prr, S, G))
        else:
            models.append(_BurnModel(b.t, b.dv, None, post[j][3:], None, None, None, S, G))
    return models


def _coast_matrices(dt: float, ctx: dyn.OrbitContext, cfg: DispersionConfig) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(NAUG)
    Q = np.zeros((NAUG, NAUG))
    F[IX, IX] = dyn.stm(dt, ctx, dyn.FULL3D)
    dz, qz = ecrv_coefficients(dt, cfg.nav.tau)
    F[IZ, IZ] *= dz
    Q[IZ, IZ] = qz**2 * np.eye(6)
    if dt > 0 or cfg.gates_tau > 0:
        dg, qg = ecrv_coefficients(dt, cfg.gates_tau)
    else:
        dg, qg = 1.0, 0.0
    F[IG, IG] *= dg
    Q[IG, IG] = qg**2 * np.eye(8)
    return F, Q


def _initial_augmented(cfg: DispersionConfig) -> np.ndarray:
    P = np.zeros((NAUG, NAUG))
    P[IX, IX] = cfg.P_x0
    P[IZ, IZ] = np.eye(6)
    P[IG, IG] = np.eye(8)
    return P


def _record_times(plan: ManeuverPlan, dt_out: float | None, t_end: float | None) -> np.ndarray:
    """Sorted output times; burn times are kept bit-exact so they can be looked up."""
    events = [0.0] + [b.t for b in plan.burns]
    t_last = events[-1]
    t_end = t_last if t_end is None else max(t_end, t_last)
    extra = [t_end] + (list(np.arange(0.0, t_end, dt_out)) if dt_out else [])
    ev = np.asarray(events)
    extra = [t for t in extra if np.min(np.abs(ev - t)) > 1e-9]
    return np.unique(np.asarray(events + extra, dtype=float))


def _lincov(plan, cfg, ctx, dt_out, t_end, burn_hook=None):
    models = _burn_models(plan, cfg, ctx)
    burn_at = {m.t: (j, m) for j, m in enumerate(models)}
    P = _initial_augmented(cfg)
    mean = np.zeros(NAUG)
    history = [CovarianceRecord(0.0, P[IX, IX].copy(), "initial")]
    burn_dv = []
    t = 0.0
    for tk in _record_times(plan, dt_out, t_end):
        if tk > t:
            F, Q = _coast_matrices(tk - t, ctx, cfg)
            P = _sym(F @ P @ F.T + Q)
            mean = F @ mean
            t = tk
        if tk in burn_at:
            j, m = burn_at[tk]
            history.append(CovarianceRecord(tk, P[IX, IX].copy(), "pre-burn"))
            if burn_hook is None:
                F, H = m.transition()
                C = _sym(H @ P @ H.T)
                burn_dv.append((m, C))
                P = _sym(F @ P @ F.T)
                mean = F @ mean
            else:
                mean, P, stats = burn_hook(j, m, mean, P)
                burn_dv.append(stats)
            history.append(CovarianceRecord(tk, P[IX, IX].copy(), "post-burn"))
        elif tk > 0.0:
            history.append(CovarianceRecord(tk, P[IX, IX].copy(), "coast"))
    if len(burn_dv) != len(models):
        raise RuntimeError("a burn time was lost from the output grid")
    return history, burn_dv, mean, P


def _lincov_dv_stats(burn_dv, P_final, plan) -> tuple[list[DvStats], DvStats]:
    stats = []
    for m, C in burn_dv:
        mag = np.linalg.norm(m.dv_nom)
        if mag >= ZERO_BURN_MPS:
            u = m.dv_nom / mag
            stats.append(DvStats.gaussian(float(mag), float(np.sqrt(max(u @ C @ u, 0.0)))))
        else:
            # magnitude of a zero-mean correction: RMS as a first-order summary
            stats.append(DvStats.gaussian(float(np.sqrt(np.trace(C))), 0.0))
    total = DvStats.gaussian(plan.total_dv, float(np.sqrt(max(P_final[IS, IS], 0.0))))
    return stats, total


# --------------------------------------------------------------------------
# Sampled burn application (hybrid and Monte Carlo share this)
# --------------------------------------------------------------------------


def _rows(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    # row-wise M @ x without BLAS so results do not depend on batch size
    return np.einsum("ij,...j->...i", M, X, optimize=False)


def _commanded_dv(m: _BurnModel, x_hat: np.ndarray) -> np.ndarray:
    """Corrective burn from nav-estimated absolute states ``(..., 6)``."""
    if m.target_pos is None:
        return m.target_vel - x_hat[..., 3:]
    v_plus = _rows(m.Phi_rv_inv, m.target_pos - _rows(m.Phi_rr, x_hat[..., :3]))
    return v_plus - x_hat[..., 3:]


def _apply_sampled_burn(m: _BurnModel, x_nom_pre: np.ndarray, dx: np.ndarray, z: np.ndarray, g: np.ndarray, p: GatesParams):
    """Return (post-burn dispersion, delivered burn) for sample arrays."""
    x_true = x_nom_pre + dx
    x_hat = x_true + _rows(m.S, z)
    dv_cmd = _commanded_dv(m, x_hat)
    dv = dv_cmd + gates_sample(dv_cmd, p, g)
    out = dx.copy()
    out[..., 3:] += dv - m.dv_nom
    return out, dv


# --------------------------------------------------------------------------
# Hybrid
# --------------------------------------------------------------------------


def _hybrid(plan, cfg, ctx, samples, seed, dt_out, t_end):
    pre, _ = plan.nominal_states(ctx)
    totals: list[np.ndarray] = []
    burn_mags: list[np.ndarray] = []

    def hook(j, m, mean, P):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, j)))
        L = psd_sqrt(P, "augmented covariance")
        a = mean + _rows(L, rng.standard_normal((samples, NAUG)))
        dx, z, g = a[:, IX], a[:, IZ], a[:, IG]
        dx_post, dv = _apply_sampled_burn(m, pre[j], dx, z, g, cfg.gates)
        mag = np.linalg.norm(dv, axis=1)
        a_post = a.copy()
        a_post[:, IX] = dx_post
        a_post[:, IS] = a[:, IS] + mag - np.linalg.norm(m.dv_nom)
        burn_mags.append(mag)
        totals.append(a_post[:, IS])
        mean_post = a_post.mean(axis=0)
        P_post = _sym(np.cov(a_post, rowvar=False))
        return mean_post, P_post, DvStats.from_samples(mag)

    history, stats, mean, P = _lincov(plan, cfg, ctx, dt_out, t_end, burn_hook=hook)
    total = DvStats.from_samples(plan.total_dv + totals[-1]) if totals else DvStats.gaussian(0.0, 0.0)
    return history, stats, total


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


def _trial_draws(seed: int, trial: int, n_steps: int, n_burns: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, trial)))
    return rng.standard_normal(6 + 6 + 8 + 6 * n_steps + 8 * n_burns)


def _simulate_chunk(args):
    plan, cfg, ctx, trial_ids, seed, times = args
    models = _burn_models(plan, cfg, ctx)
    pre_nom, _ = plan.nominal_states(ctx)
    burn_idx = {m.t: j for j, m in enumerate(models)}
    n_steps, n_burns = len(times) - 1, len(models)
    draws = np.array([_trial_draws(seed, int(i), n_steps, n_burns) for i in trial_ids])
    B = len(trial_ids)
    L0 = psd_sqrt(cfg.P_x0, "initial dispersion covariance")
    dx = _rows(L0, draws[:, 0:6])
    z = draws[:, 6:12].copy()
    g = draws[:, 12:20].copy()
    zoff = 20
    goff = 20 + 6 * n_steps

    nom = plan.x0.copy()
    states = np.empty((B, len(times), 6))
    nav_err = np.empty((B, len(times), 6))
    nav_sigma = np.empty((len(times), 6))
    pre_b = np.empty((B, n_burns, 6))
    post_b = np.empty((B, n_burns, 6))
    dvs = np.empty((B, n_burns, 3))
    t_prev = 0.0
    for i, tk in enumerate(times):
        if i > 0:
            dt = tk - t_prev
            Phi = dyn.stm(dt, ctx, dyn.FULL3D)
            nom = Phi @ nom
            dx = _rows(Phi, dx)
            dz, qz = ecrv_coefficients(dt, cfg.nav.tau)
            z = dz * z + qz * draws[:, zoff + 6 * (i - 1) : zoff + 6 * i]
            t_prev = tk
        S = cfg.nav.sqrt(tk)
        if tk in burn_idx:
            j = burn_idx[tk]
            m = models[j]
            if j > 0:
                dg, qg = ecrv_coefficients(tk - models[j - 1].t, cfg.gates_tau)
                g = dg * g + qg * draws[:, goff + 8 * j : goff + 8 * (j + 1)]
            pre_b[:, j] = dx
            dx, dv = _apply_sampled_burn(m, pre_nom[j], dx, z, g, cfg.gates)
            nom = nom.copy()
            nom[3:] += m.dv_nom
            post_b[:, j] = dx
            dvs[:, j] = dv
        states[:, i] = nom + dx
        nav_err[:, i] = _rows(S, z)
        nav_sigma[i] = np.sqrt(np.clip(np.diag(cfg.nav.covariance(tk)), 0.0, None))
    return states, nav_err, nav_sigma, pre_b, post_b, dvs


def _montecarlo(plan, cfg, ctx, trials, seed, dt_out, t_end, workers):
    times = _record_times(plan, dt_out or 60.0, t_end)
    ids = np.arange(trials)
    workers = max(1, int(workers or 1))
    chunks = [c for c in np.array_split(ids, workers) if c.size]
    args = [(plan, cfg, ctx, c, seed, times) for c in chunks]
    if workers == 1 or len(chunks) == 1:
        parts = [_simulate_chunk(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as ex:
            parts = list(ex.map(_simulate_chunk, args))
    states, nav_err, nav_sigma, pre_b, post_b, dvs = (
        np.concatenate([p[k] for p in parts]) if k != 2 else parts[0][2] for k in range(6)
    )
    ens = TrialEnsemble(times, states, nav_err, nav_sigma, pre_b, post_b, dvs)

    history = [CovarianceRecord(0.0, cfg.P_x0.copy(), "initial")]
    burn_t = {b.t: j for j, b in enumerate(plan.burns)}
    nominal = np.array([plan.state_at(t, ctx) for t in times])
    for i, tk in enumerate(times):
        if tk in burn_t:
            j = burn_t[tk]
            history.append(CovarianceRecord(tk, _sample_cov(pre_b[:, j]), "pre-burn"))
            history.append(CovarianceRecord(tk, _sample_cov(post_b[:, j]), "post-burn"))
        elif tk > 0.0:
            history.append(CovarianceRecord(tk, _sample_cov(states[:, i] - nominal[i]), "coast"))
    mags = np.linalg.norm(dvs, axis=2)
    stats = [DvStats.from_samples(mags[:, j]) for j in range(mags.shape[1])]
    total = DvStats.from_samples(mags.sum(axis=1))
    return history, stats, total, ens


def _sample_cov(x: np.ndarray) -> np.ndarray:
    if x.shape[0] < 2:
        return np.zeros((x.shape[1], x.shape[1]))
    return _sym(np.cov(x, rowvar=False))


def closed_loop_dispersion(
    plan: ManeuverPlan,
    cfg: DispersionConfig,
    ctx: dyn.OrbitContext,
    mode: str = LINCOV,
    trials: int | None = None,
    seed: int = 0,
    dt_out: float | None = None,
    t_end: float | None = None,
    workers: int = 1,
) -> DispersionResult:
    """Dispersion statistics of ``plan`` flown with closed-loop corrections.

    ``trials`` is the Monte Carlo trial count (default 5000) or the hybrid
    per-burn sample count (default ``cfg.hybrid_samples``); it is ignored
    by ``lincov``. ``dt_out`` adds coast records on a uniform grid.
    """
    if mode not in MODES:
        raise ValueError(f"unknown dispersion mode {mode!r}; expected one of {MODES}")
    if not plan.burns:
        raise ValueError("plan has no burns")
    if mode == LINCOV:
        history, burn_dv, _, P = _lincov(plan, cfg, ctx, dt_out, t_end)
        stats, total = _lincov_dv_stats(burn_dv, P, plan)
        return DispersionResult(mode, history, stats, total)
    if mode == HYBRID:
        n = cfg.hybrid_samples if trials is None else int(trials)
        if n < 2:
            raise ValueError("hybrid mode needs at least 2 samples per burn")
        history, stats, total = _hybrid(plan, cfg, ctx, n, seed, dt_out, t_end)
        return DispersionResult(mode, history, stats, total)
    n = 5000 if trials is None else int(trials)
    if n < 1:
        raise ValueError("Monte Carlo mode needs at least one trial")
    history, stats, total, ens = _montecarlo(plan, cfg, ctx, n, seed, dt_out, t_end, workers)
    return DispersionResult(mode, history, stats, total, ens)


# --------------------------------------------------------------------------
# Free drift and safety
# --------------------------------------------------------------------------


@dataclass
class DriftPoint:
    k: int
    tau: float
    mean: np.ndarray
    cov: np.ndarray


def drift_grid(t_safe: float, gamma: float) -> np.ndarray:
    """{0, gamma, 2 gamma, ..., t_safe}.

    Points are exact multiples of ``gamma`` with ``t_safe`` appended, so the
    grid for ``gamma / 2`` contains the grid for ``gamma``.
    """
    if t_safe < 0 or gamma <= 0:
        raise ValueError("need t_safe >= 0 and gamma > 0")
    m = int(np.floor(t_safe / gamma + 1e-9))
    g = gamma * np.arange(m + 1, dtype=float)
    if t_safe - g[-1] > 1e-9 * max(t_safe, 1.0):
        g = np.append(g, t_safe)
    else:
        g[-1] = t_safe
    return g


def free_drift_envelope(node_states, node_covariances, drift_set, ctx: dyn.OrbitContext) -> list[DriftPoint]:
    """Drifted means and covariances for every node and drift time."""
    out = []
    for k, (x, P) in enumerate(zip(node_states, node_covariances)):
        x = np.asarray(x, dtype=float)
        P = np.asarray(P, dtype=float)
        mode = dyn.PLANAR if x.size == 4 else dyn.FULL3D
        for tau in drift_set:
            Phi = dyn.stm(tau, ctx, mode)
            out.append(DriftPoint(k, float(tau), Phi @ x, _sym(Phi @ P @ Phi.T)))
    return out


def circumscribing_radius(P_pos, c: float) -> float:
    """c * sqrt(largest eigenvalue) of a position covariance block."""
    w = np.linalg.eigvalsh(np.asarray(P_pos, dtype=float))
    return float(c * np.sqrt(max(w[-1], 0.0)))


@dataclass
class DriftCheck:
    k: int
    tau: float
    position: np.ndarray
    buffer: float
    clearance: float


@dataclass
class SafetyReport:
    checks: list[DriftCheck]
    r_kos: float
    multiplier: float

    @property
    def passed(self) -> bool:
        return all(c.clearance > 0.0 for c in self.checks)

    @property
    def worst(self) -> DriftCheck:
        return min(self.checks, key=lambda c: c.clearance)

    @property
    def min_clearance(self) -> float:
        return self.worst.clearance

    def summary(self) -> dict:
        w = self.worst
        return {
            "passed": self.passed,
            "r_kos_m": self.r_kos,
            "multiplier": self.multiplier,
            "checks": len(self.checks),
            "min_clearance_m": w.clearance,
            "worst_node": w.k,
            "worst_tau_s": w.tau,
            "worst_buffer_m": w.buffer,
        }


def verify_drift_safety(envelope: list[DriftPoint], r_kos: float, c: float) -> SafetyReport:
    """In-plane clearance of every drifted c-sigma circle from the KOS.

    The check uses the (x, y) position block for planar and 3-D states
    alike, i.e. the same circumscribing-circle buffer as the optimizer.
    """
    checks = []
    for p in envelope:
        pos = np.asarray(p.mean[:2], dtype=float)
        buf = circumscribing_radius(p.cov[:2, :2], c)
        checks.append(DriftCheck(p.k, p.tau, pos, buf, float(np.linalg.norm(pos) - r_kos - buf)))
    return SafetyReport(checks, float(r_kos), float(c))


def plan_drift_nodes(plan: ManeuverPlan, result: DispersionResult, ctx: dyn.OrbitContext):
    """Node states/covariances whose free drift must stay clear.

    Node 0 is the initial state (first burn missed); node j + 1 is the
    state just after burn j (burn j + 1 missed). The state after the last
    burn is not a node: no planned maneuver remains to be missed.
    """
    _, post = plan.nominal_states(ctx)
    states = [plan.x0] + list(post[:-1])
    covs = [next(r.P for r in result.history if r.tag == "initial")] + result.post_burn[:-1]
    return states, covs
