"""Passively safe trajectory optimization by successive convexification.

A planar CW transfer with ``N`` impulsive burns at nodes ``0..k_f`` is
optimized for fuel or time. Free drift from every post-burn node state
(the next burn missed) must stay outside the keep-out sphere (KOS) for
the whole drift horizon, inflated by a covariance buffer so that the
constraint holds with probability ``beta``.

Internally the subproblems are nondimensionalized (length 1 km, time
1/n) to keep the interior-point solver well scaled.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import conic
from . import dynamics as dyn
from . import uq
from .stochastics import ZERO_BURN_MPS

log = logging.getLogger(__name__)

MIN_FUEL = "min_fuel"
MIN_TIME = "min_time"
INIT, SCVX, FIXED = "init", "scvx", "fixed"

_L = 1000.0  # length unit [m]
_SLACK_TOL_M = 1e-6
_IN_PLANE = [0, 1, 3, 4]


class InfeasibleError(RuntimeError):
    """The transfer cannot satisfy its constraints; ``report`` has details."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


class DegenerateLinearizationError(ValueError):
    """A drifted reference position sits on the KOS center."""


class SolverFailure(RuntimeError):
    """The conic solver returned neither a solution nor an infeasibility proof."""


# --------------------------------------------------------------------------
# Chance constraints
# --------------------------------------------------------------------------


def chi2_radius(beta: float) -> float:
    """Radius c of the beta-probability ellipse of a 2-D Gaussian."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return float(np.sqrt(-2.0 * np.log1p(-beta)))


def _lambda_max2(S: np.ndarray) -> np.ndarray:
    a, b, d = S[..., 0, 0], 0.5 * (S[..., 0, 1] + S[..., 1, 0]), S[..., 1, 1]
    return 0.5 * (a + d) + np.sqrt(0.25 * (a - d) ** 2 + b**2)


def buffer_radius(Sigma2, c: float) -> float | np.ndarray:
    """c * sqrt(lambda_max(Sigma2)): the circle circumscribing the c-sigma ellipse.

    Accepts a single 2x2 block or a stack ``(..., 2, 2)``.
    """
    S = np.asarray(Sigma2, dtype=float)
    if S.shape[-2:] != (2, 2):
        raise ValueError(f"position covariance must be 2x2, got shape {S.shape}")
    r = c * np.sqrt(np.clip(_lambda_max2(S), 0.0, None))
    return float(r) if r.ndim == 0 else r


@dataclass
class ChanceConfig:
    r_kos: float
    beta: float = 0.99
    t_safe: float = 86400.0
    gamma: float = 600.0
    gamma_verify: float = 60.0

    def __post_init__(self):
        if self.r_kos < 0:
            raise ValueError("r_kos must be non-negative")
        chi2_radius(self.beta)
        if self.gamma <= 0 or self.gamma_verify <= 0 or self.t_safe < 0:
            raise ValueError("need t_safe >= 0 and positive grid spacings")

    @property
    def c(self) -> float:
        return chi2_radius(self.beta)

    def grid(self) -> np.ndarray:
        return uq.drift_grid(self.t_safe, self.gamma)

    def dense_grid(self) -> np.ndarray:
        return uq.drift_grid(self.t_safe, self.gamma_verify)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class TransferProblem:
    """Boundary conditions of a planar transfer with ``n_nodes`` burns."""

    ctx: dyn.OrbitContext
    r_i: np.ndarray
    v_i: np.ndarray
    r_f: np.ndarray
    v_f: np.ndarray
    n_nodes: int

    def __post_init__(self):
        for name in ("r_i", "v_i", "r_f", "v_f"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (2,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite planar 2-vector")
            setattr(self, name, v)
        if self.n_nodes < 2:
            raise ValueError("a transfer needs at least 2 nodes")

    @property
    def x_i(self) -> np.ndarray:
        return np.concatenate([self.r_i, self.v_i])

    @property
    def x_f(self) -> np.ndarray:
        return np.concatenate([self.r_f, self.v_f])


@dataclass
class NominalTrajectory:
    """Post-burn node states ``X``, burns ``u`` (node k fires at ``times[k]``)
    and intervals ``dt`` (``dt[k]`` follows node k)."""

    X: np.ndarray
    u: np.ndarray
    dt: np.ndarray
    ctx: dyn.OrbitContext

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, 4)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 2)
        self.dt = np.asarray(self.dt, dtype=float).reshape(-1)
        if not (len(self.X) == len(self.u) == len(self.dt) + 1):
            raise ValueError("need N node states, N burns and N - 1 intervals")

    @property
    def n_nodes(self) -> int:
        return len(self.X)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dt)])

    @property
    def tf(self) -> float:
        return float(self.dt.sum())

    @property
    def burn_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.u, axis=1)

    @property
    def total_dv(self) -> float:
        return float(self.burn_magnitudes.sum())

    @property
    def x_i(self) -> np.ndarray:
        """Pre-burn state at node 0."""
        x = self.X[0].copy()
        x[2:] -= self.u[0]
        return x

    def residuals(self) -> tuple[float, float]:
        """Largest (position, velocity) dynamics defect, re-propagated exactly."""
        rp, rv = 0.0, 0.0
        for k, h in enumerate(self.dt):
            e = self.X[k + 1] - dyn.propagate(self.X[k], h, self.ctx, self.u[k + 1])
            rp = max(rp, float(np.abs(e[:2]).max()))
            rv = max(rv, float(np.abs(e[2:]).max()))
        return rp, rv

    def to_plan(self, labels: list[str] | None = None) -> uq.ManeuverPlan:
        burns = [
            uq.Burn(t, [du[0], du[1], 0.0], labels[k] if labels else f"BR{k + 1}")
            for k, (t, du) in enumerate(zip(self.times, self.u))
        ]
        return uq.ManeuverPlan(dyn.planar_to_3d(self.x_i), burns)

    def to_dict(self) -> dict:
        return {
            "times_s": self.times.tolist(),
            "dt_s": self.dt.tolist(),
            "X": self.X.tolist(),
            "u_mps": self.u.tolist(),
            "total_dv_mps": self.total_dv,
            "tf_s": self.tf,
        }


def initial_reference(r_i, r_f, tf0: float, N: int) -> tuple[np.ndarray, float]:
    """Straight-line reference positions ``(N, 2)`` and uniform spacing tf0 / k_f."""
    if N < 2:
        raise ValueError("need N >= 2")
    if tf0 <= 0:
        raise ValueError("tf0 must be positive")
    r_i = np.asarray(r_i, dtype=float)
    r_f = np.asarray(r_f, dtype=float)
    s = np.arange(N)[:, None] / (N - 1)
    return r_i + s * (r_f - r_i), tf0 / (N - 1)


def trajectory_from_positions(r, dt, v_i, v_f, ctx: dyn.OrbitContext) -> NominalTrajectory:
    """Exact trajectory through node positions ``r`` with intervals ``dt``.

    Every coast arc is a two-point boundary value solution, so the
    dynamics hold to roundoff; burns absorb the velocity jumps.
    """
    r = np.asarray(r, dtype=float).reshape(-1, 2)
    dt = np.asarray(dt, dtype=float).reshape(-1)
    N = len(r)
    X = np.zeros((N, 4))
    u = np.zeros((N, 2))
    v_minus = np.asarray(v_i, dtype=float)
    for k in range(N - 1):
        Prr, Prv, Pvr, Pvv = dyn.stm_blocks(dt[k], ctx, dyn.PLANAR)
        uq._check_transfer(Prv, dt[k], ctx.n)
        v_plus = np.linalg.solve(Prv, r[k + 1] - Prr @ r[k])
        X[k] = np.concatenate([r[k], v_plus])
        u[k] = v_plus - v_minus
        v_minus = Pvr @ r[k] + Pvv @ v_plus
    X[-1] = np.concatenate([r[-1], v_f])
    u[-1] = np.asarray(v_f, dtype=float) - v_minus
    return NominalTrajectory(X, u, dt, ctx)


# --------------------------------------------------------------------------
# Buffers
# --------------------------------------------------------------------------


@dataclass
class BufferField:
    """Buffer radii ``values[k, j]`` for drift node k and drift time ``taus[j]``.

    ``slopes[i, k, j]`` optionally holds d(values[k, j]) / d(dt[i]) [m/s],
    letting the interval-varying subproblem see how the dispersion reacts
    to retiming.
    """

    taus: np.ndarray
    values: np.ndarray
    slopes: np.ndarray | None = None

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, self.taus.size)
        if np.any(self.values < 0):
            raise ValueError("buffer radii must be non-negative")

    @classmethod
    def zeros(cls, n_nodes: int, taus) -> "BufferField":
        taus = np.asarray(taus, dtype=float)
        return cls(taus, np.zeros((n_nodes, taus.size)))


_STM_CACHE: dict = {}


def _drift_stack(taus: np.ndarray, ctx: dyn.OrbitContext) -> np.ndarray:
    key = (ctx.n, taus.tobytes())
    if key not in _STM_CACHE:
        if len(_STM_CACHE) > 64:
            _STM_CACHE.clear()
        _STM_CACHE[key] = np.stack([dyn.stm(t, ctx) for t in taus]) if taus.size else np.zeros((0, 4, 4))
    return _STM_CACHE[key]


def drift_node_covariances(traj: NominalTrajectory, dispersion: uq.DispersionConfig) -> tuple[np.ndarray, np.ndarray]:
    """In-plane covariances ``(initial, post_burn)`` of the closed-loop dispersion.

    ``post_burn`` has one 4x4 block per burn. A transfer flown without any
    dispersion source gets zero covariance.
    """
    plan = traj.to_plan()
    res = uq.closed_loop_dispersion(plan, dispersion, traj.ctx, mode=uq.LINCOV)
    ix = np.ix_(_IN_PLANE, _IN_PLANE)
    P0 = next(r.P for r in res.history if r.tag == "initial")[ix]
    return P0, np.array([P[ix] for P in res.post_burn])


def compute_buffers(traj: NominalTrajectory, dispersion: uq.DispersionConfig | None, taus, c: float) -> BufferField:
    """Buffers on the post-burn nodes ``0..k_f - 1`` of ``traj``."""
    taus = np.asarray(taus, dtype=float)
    n_drift = traj.n_nodes - 1
    if dispersion is None:
        return BufferField.zeros(n_drift, taus)
    _, post = drift_node_covariances(traj, dispersion)
    return BufferField(taus, _buffers_for(post[:n_drift], taus, c, traj.ctx))


def with_slopes(buffers: BufferField, traj: NominalTrajectory, dispersion, c: float, h: float = 1.0) -> BufferField:
    """Attach central-difference interval sensitivities to ``buffers``.

    Each interval is stretched by ``h`` seconds with the node positions
    held, so later burns shift and the burns themselves are re-solved.
    """
    if dispersion is None:
        return BufferField(buffers.taus, buffers.values, np.zeros((len(traj.dt),) + buffers.values.shape))
    r = traj.X[:, :2]
    v_i, v_f = traj.x_i[2:], traj.X[-1, 2:]
    slopes = np.zeros((len(traj.dt),) + buffers.values.shape)
    for i in range(len(traj.dt)):
        vals = []
        for sgn in (1.0, -1.0):
            dt = traj.dt.copy()
            dt[i] += sgn * h
            t2 = trajectory_from_positions(r, dt, v_i, v_f, traj.ctx)
            vals.append(compute_buffers(t2, dispersion, buffers.taus, c).values)
        slopes[i] = (vals[0] - vals[1]) / (2 * h)
    return BufferField(buffers.taus, buffers.values, slopes)


def _buffers_for(covs: np.ndarray, taus: np.ndarray, c: float, ctx: dyn.OrbitContext) -> np.ndarray:
    Phi_r = _drift_stack(taus, ctx)[:, :2, :]
    S = np.einsum("tij,kjl,tml->ktim", Phi_r, covs, Phi_r)
    return buffer_radius(S, c).reshape(len(covs), taus.size)


def drift_clearance(traj: NominalTrajectory, buffers: BufferField, r_kos: float) -> np.ndarray:
    """Nonlinear clearance ``||Phi_r(tau) X[k]|| - r_kos - r_b[k, tau]``."""
    Phi_r = _drift_stack(buffers.taus, traj.ctx)[:, :2, :]
    n = buffers.values.shape[0]
    pos = np.einsum("tij,kj->kti", Phi_r, traj.X[:n])
    return np.linalg.norm(pos, axis=-1) - r_kos - buffers.values


# --------------------------------------------------------------------------
# Subproblem
# --------------------------------------------------------------------------


@dataclass
class ScpConfig:
    objective: str = MIN_FUEL
    tf0: float = 7200.0
    phi: float = 0.1
    max_iters: int = 50
    tol_dt: float = 1e-3
    tol_obj: float = 1e-4
    tf_max: float | None = None
    tf_fixed: bool = False
    dv_max: float | None = None
    dt_min: float = 60.0
    waypoints: dict[int, tuple[float, float]] = field(default_factory=dict)
    slack_penalty: float = 1e6  # objective units per meter of KOS slack
    margin_m: float = 0.01  # subproblem KOS margin; absorbs buffer drift from burn changes
    max_refinements: int = 20
    time_starts: int = 4  # extra fixed-duration starts for minimum time

    def __post_init__(self):
        if self.objective not in (MIN_FUEL, MIN_TIME):
            raise ValueError(f"objective must be {MIN_FUEL!r} or {MIN_TIME!r}, got {self.objective!r}")
        if self.phi <= 0:
            raise ValueError("trust-region fraction phi must be positive")
        if self.max_iters < 2:
            raise ValueError("max_iters must exceed 1")
        if self.tf0 <= 0:
            raise ValueError("tf0 must be positive")
        if self.tf_fixed and self.tf_max is None:
            raise ValueError("tf_fixed needs tf_max")
        self.waypoints = {int(k): tuple(float(v) for v in r) for k, r in self.waypoints.items()}


@dataclass
class SubproblemLayout:
    X: np.ndarray
    u: np.ndarray
    s: np.ndarray
    th: np.ndarray | None
    slack: np.ndarray | None
    kos: list[tuple[int, float]]


def _scaling(ctx: dyn.OrbitContext) -> np.ndarray:
    V = _L * ctx.n
    return np.array([_L, _L, V, V])


def _kos_rows(reference: NominalTrajectory, buffers: BufferField, r_kos: float):
    """Unit gradients and right-hand sides of the linearized KOS constraints."""
    ctx = reference.ctx
    Phi_r = _drift_stack(buffers.taus, ctx)[:, :2, :]
    n = buffers.values.shape[0]
    pos = np.einsum("tij,kj->kti", Phi_r, reference.X[:n])
    norm = np.linalg.norm(pos, axis=-1)
    if np.any(norm < 1e-9):
        k, j = np.argwhere(norm < 1e-9)[0]
        raise DegenerateLinearizationError(
            f"drifted reference of node {k} at tau={buffers.taus[j]:.1f} s is at the KOS center"
        )
    g = pos / norm[..., None]
    # row (k, j): (g^T Phi_r) X[k] >= r_kos + r_b
    A = np.einsum("kti,tij->ktj", g, Phi_r)
    return A, r_kos + buffers.values


def build_subproblem(
    reference: NominalTrajectory,
    buffers: BufferField,
    problem: TransferProblem,
    cfg: ScpConfig,
    chance: ChanceConfig,
    stage: str,
    phi: float | None = None,
    slack: bool = False,
) -> tuple[conic.ConicProblem, SubproblemLayout]:
    """Convex subproblem linearized about ``reference``.

    ``init`` and ``fixed`` hold the intervals at ``reference.dt`` and
    minimize fuel. ``scvx`` also varies the intervals inside the trust
    region ``phi`` with dynamics linearized in time and minimizes the
    configured objective.
    """
    if stage not in (INIT, SCVX, FIXED):
        raise ValueError(f"unknown stage {stage!r}")
    ctx = reference.ctx
    N = problem.n_nodes
    if reference.n_nodes != N:
        raise ValueError("reference node count does not match the problem")
    D = _scaling(ctx)
    V = D[2]
    scvx = stage == SCVX
    phi = cfg.phi if phi is None else phi

    P = conic.ConicProblem()
    X = np.stack([P.new_vars(4) for _ in range(N)])
    u = np.stack([P.new_vars(2) for _ in range(N)])
    fuel_cost = 1.0 if (not scvx or cfg.objective == MIN_FUEL) else 0.0
    s = np.array([conic.add_epigraph_norm(P, u[k], cost=fuel_cost) for k in range(N)])
    th = None
    if scvx:
        th0 = ctx.n * reference.dt
        lo = np.maximum(th0 * (1 - phi), ctx.n * cfg.dt_min)
        hi = th0 * (1 + phi)
        th = np.array([P.new_vars(1, lb=float(a), ub=float(b))[0] for a, b in zip(lo, hi)])
        if cfg.objective == MIN_TIME:
            P.add_cost(th, 1.0)

    # boundary conditions, X[0] = x_i + B u[0]
    xi = problem.x_i / D
    for i in range(4):
        if i < 2:
            P.add_eq([X[0][i]], [1.0], xi[i])
        else:
            P.add_eq([X[0][i], u[0][i - 2]], [1.0, -1.0], xi[i])
    xf = problem.x_f / D
    for i in range(4):
        P.add_eq([X[-1][i]], [1.0], xf[i])

    # dynamics
    Dinv = 1.0 / D
    for k in range(N - 1):
        Phi = Dinv[:, None] * dyn.stm(reference.dt[k], ctx) * D[None, :]
        cols = list(X[k + 1]) + list(X[k])
        for i in range(4):
            idx = cols + ([u[k + 1][i - 2]] if i >= 2 else [])
            val = [1.0 if j == i else 0.0 for j in range(4)] + list(-Phi[i])
            val += [-1.0] if i >= 2 else []
            rhs = 0.0
            if scvx:
                dPhi = Dinv[:, None] * dyn.stm_dt_derivative(reference.dt[k], ctx) * D[None, :] / ctx.n
                d = dPhi[i] @ (reference.X[k] / D)
                idx.append(th[k])
                val.append(-d)
                rhs = -d * ctx.n * reference.dt[k]
            P.add_eq(idx, val, rhs)

    for k, r in cfg.waypoints.items():
        if not 0 <= k < N:
            raise ValueError(f"waypoint node {k} outside 0..{N - 1}")
        for i in range(2):
            P.add_eq([X[k][i]], [1.0], r[i] / _L)

    if cfg.dv_max is not None:
        P.add_le(s, 1.0, cfg.dv_max / V)
    if scvx and cfg.tf_max is not None:
        if cfg.tf_fixed:
            P.add_eq(th, 1.0, ctx.n * cfg.tf_max)
        else:
            P.add_le(th, 1.0, ctx.n * cfg.tf_max)

    # linearized keep-out constraints
    A, rhs = _kos_rows(reference, buffers, chance.r_kos + cfg.margin_m)
    kos = []
    slack_idx = []
    obj_unit = V if (not scvx or cfg.objective == MIN_FUEL) else 1.0 / ctx.n
    for k in range(A.shape[0]):
        Ak = A[k] * D[None, :] / _L
        for j in range(A.shape[1]):
            idx = list(X[k])
            val = list(-Ak[j])
            if scvx and buffers.slopes is not None:
                # r_b + sum_i slope_i (dt_i - dt0_i), in scaled units
                sl = buffers.slopes[:, k, j] / _L / ctx.n
                idx += list(th)
                val += list(sl)
                rhs_kj = rhs[k, j] / _L - float(sl @ (ctx.n * reference.dt))
            else:
                rhs_kj = rhs[k, j] / _L
            if slack:
                sv = P.new_vars(1, lb=0.0, cost=cfg.slack_penalty * _L / obj_unit)[0]
                slack_idx.append(sv)
                idx.append(sv)
                val.append(-1.0)
            P.add_le(idx, val, -rhs_kj)
            kos.append((k, float(buffers.taus[j])))
    layout = SubproblemLayout(X, u, s, th, np.array(slack_idx) if slack else None, kos)
    return P, layout


def _extract(sol: conic.ConicSolution, layout: SubproblemLayout, reference: NominalTrajectory):
    D = _scaling(reference.ctx)
    X = sol.x[layout.X] * D
    u = sol.x[layout.u] * D[2]
    dt = sol.x[layout.th] / reference.ctx.n if layout.th is not None else reference.dt.copy()
    slack = float(sol.x[layout.slack].max(initial=0.0) * _L) if layout.slack is not None else 0.0
    return NominalTrajectory(X, u, dt, reference.ctx), slack


# --------------------------------------------------------------------------
# Algorithm
# --------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    stage: str
    accepted: bool
    objective: float
    baseline: float  # merit of the reference entering the iteration
    merit: float  # merit of the recorded trajectory
    total_dv: float
    tf: float
    max_dt_change: float
    max_violation_m: float
    phi: float
    n_taus: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class ScpResult:
    trajectory: NominalTrajectory
    history: list[IterationRecord]
    safety: uq.SafetyReport
    buffers: BufferField
    converged: bool
    problem: TransferProblem
    cfg: ScpConfig
    chance: ChanceConfig
    seconds: float = 0.0

    @property
    def objective(self) -> float:
        return _objective(self.trajectory, self.cfg)


def _objective(traj: NominalTrajectory, cfg: ScpConfig) -> float:
    return traj.total_dv if cfg.objective == MIN_FUEL else traj.tf


def _solve_stage(reference, buffers, problem, cfg, chance, stage, phi=None):
    """Solve one subproblem, falling back to keep-out slack when infeasible.

    The slack retry is solved lexicographically: first the least total
    slack, then the real objective with the slack capped at that value.
    This is the large-penalty limit without the ill-conditioning of a
    1e9-sized cost coefficient. Returns ``(trajectory, total slack [m])``.
    """
    P, layout = build_subproblem(reference, buffers, problem, cfg, chance, stage, phi)
    sol = conic.solve(P)
    if sol.ok:
        return _extract(sol, layout, reference)[0], 0.0
    log.debug("%s subproblem returned %s; retrying with slack", stage, sol.status)
    P, layout = build_subproblem(reference, buffers, problem, cfg, chance, stage, phi, slack=True)
    cost = list(P.c)
    P.c = [0.0] * P.n_vars
    P.add_cost(layout.slack, 1.0)
    first = conic.solve(P)
    if not first.ok:
        if first.status == conic.INFEASIBLE:
            raise InfeasibleError(f"{stage} subproblem infeasible even with keep-out slack", {"stage": stage})
        raise SolverFailure(f"{stage} subproblem: solver status {first.status}")
    least = float(first.x[layout.slack].sum())
    P.c = cost
    for i in layout.slack:
        P.c[int(i)] = 0.0
    P.add_le(layout.slack, 1.0, least * (1 + 1e-6) + 1e-9)
    sol = conic.solve(P)
    if not sol.ok:
        sol = first
    return _extract(sol, layout, reference)[0], least * _L


def _clean(traj: NominalTrajectory, problem: TransferProblem, cfg: ScpConfig) -> NominalTrajectory:
    """Rebuild burns from the solved node positions so the dynamics are exact."""
    r = traj.X[:, :2].copy()
    r[0], r[-1] = problem.r_i, problem.r_f
    for k, w in cfg.waypoints.items():
        r[k] = w
    try:
        return trajectory_from_positions(r, traj.dt, problem.v_i, problem.v_f, traj.ctx)
    except uq.SingularTransferError:
        return traj


def _reference_from_line(problem: TransferProblem, cfg: ScpConfig) -> NominalTrajectory:
    r0, dxi = initial_reference(problem.r_i, problem.r_f, cfg.tf0, problem.n_nodes)
    for k, w in cfg.waypoints.items():
        r0[k] = w
    dt = np.full(problem.n_nodes - 1, dxi)
    try:
        return trajectory_from_positions(r0, dt, problem.v_i, problem.v_f, problem.ctx)
    except uq.SingularTransferError:
        v = np.gradient(r0, dxi, axis=0)
        X = np.hstack([r0, v])
        return NominalTrajectory(X, np.zeros((problem.n_nodes, 2)), dt, problem.ctx)


def _check_initial_node(problem, dispersion, chance, taus):
    """Drift from the pre-burn initial state is fixed by the boundary conditions."""
    traj = NominalTrajectory(np.tile(problem.x_i, (2, 1)), np.zeros((2, 2)), [1.0], problem.ctx)
    if dispersion is None:
        P0 = np.zeros((1, 4, 4))
    else:
        ix = np.ix_(_IN_PLANE, _IN_PLANE)
        P0 = uq._initial_augmented(dispersion)[uq.IX, uq.IX][ix][None]
    buf = BufferField(taus, _buffers_for(P0, taus, chance.c, problem.ctx))
    clr = drift_clearance(traj, buf, chance.r_kos)
    if clr.min() <= 0:
        j = int(np.argmin(clr[0]))
        raise InfeasibleError(
            f"free drift from the initial state violates the KOS at tau={taus[j]:.0f} s",
            {"stage": "initial", "tau_s": float(taus[j]), "clearance_m": float(clr[0, j])},
        )


def safety_report(traj: NominalTrajectory, dispersion, chance: ChanceConfig, taus=None) -> uq.SafetyReport:
    """Drift-safety verdict for the initial state and post-burn nodes ``0..k_f - 1``."""
    taus = chance.dense_grid() if taus is None else np.asarray(taus, dtype=float)
    states = [traj.x_i] + list(traj.X[:-1])
    if dispersion is None:
        covs = [np.zeros((4, 4))] * len(states)
    else:
        P0, post = drift_node_covariances(traj, dispersion)
        covs = [P0] + list(post[:-1])
    env = uq.free_drift_envelope(states, covs, taus, traj.ctx)
    return uq.verify_drift_safety(env, chance.r_kos, chance.c)


def solve_scp(
    problem: TransferProblem,
    cfg: ScpConfig,
    chance: ChanceConfig,
    dispersion: uq.DispersionConfig | None,
    on_iteration=None,
) -> ScpResult:
    """Successive convexification with trust-region acceptance.

    Each iteration refreshes the buffers from the closed-loop dispersion of
    the current reference, re-solves the fixed-interval problem as a
    baseline, takes a linearized interval step (buffers linearized in the
    intervals too) and re-solves at the new intervals with exact dynamics.
    A candidate is kept only if it lowers the merit (objective plus
    penalized keep-out violation, each candidate scored with its own
    buffers); otherwise the trust region is halved. Accepted iterates are
    checked on the dense drift grid; a violation adds the offending drift
    times to the subproblem grid and restarts from the last dense-safe
    iterate, which remains feasible on the refined grid.

    The fuel problem is solved from two starts, the straight-line
    reference and the buffer-free optimum, and the better result is kept.
    Minimum time continues from each minimum-fuel solution that fits under
    the fuel cap, including fuel optima at a ladder of fixed durations,
    and keeps the fastest. ``dispersion=None`` optimizes without
    buffers.
    """
    t_start = time.perf_counter()
    _check_initial_node(problem, dispersion, chance, chance.dense_grid())
    fuel_cfg = cfg if cfg.objective == MIN_FUEL else replace(cfg, objective=MIN_FUEL, dv_max=None)
    runs, errors = [], []

    def attempt(phases, run_cfg=fuel_cfg):
        hist: list[IterationRecord] = []
        ref, taus, conv = None, chance.grid(), False
        try:
            for phase, disp in phases:
                ref, taus, conv = _iterate(problem, run_cfg, chance, disp, ref, taus, hist, on_iteration, phase)
        except (InfeasibleError, SolverFailure, uq.SingularTransferError) as exc:
            errors.append(exc)
            return
        runs.append((ref, taus, conv, hist))

    attempt([("line", dispersion)])
    if dispersion is not None:
        attempt([("buffer-free", None), ("continuation", dispersion)])
    if not runs:
        raise errors[0]
    ok = [r for r in runs if r[2]] or runs
    ref, taus, converged, history = min(ok, key=lambda r: _objective(r[0], fuel_cfg))

    if cfg.objective == MIN_TIME:
        if cfg.dv_max is not None and ref.total_dv > cfg.dv_max * (1 + 1e-9):
            raise InfeasibleError(
                f"minimum fuel {ref.total_dv:.4f} m/s exceeds the cap {cfg.dv_max:.4f} m/s",
                {"stage": "init", "min_dv_mps": ref.total_dv, "dv_max_mps": cfg.dv_max},
            )
        # Minimum time is strongly multimodal. Every fuel solution under the
        # cap is a feasible start: the free-duration ones plus fuel optima at
        # a ladder of fixed durations. Keep the fastest.
        starts = list(ok)
        tf_hi = cfg.tf_max if cfg.tf_max is not None else ref.tf
        for frac in np.linspace(0.5, 1.0, cfg.time_starts + 1)[:-1]:
            tf_l = float(frac * tf_hi)
            n_runs = len(runs)
            free = [(f"ladder-{tf_l:.0f}s", None), ("continuation", dispersion)] if dispersion is not None else []
            attempt(free or [(f"ladder-{tf_l:.0f}s", None)], replace(fuel_cfg, tf_fixed=True, tf_max=tf_l, tf0=tf_l))
            starts += runs[n_runs:]
        timed = []
        for r_ref, r_taus, _, r_hist in starts:
            if cfg.dv_max is not None and r_ref.total_dv > cfg.dv_max * (1 + 1e-9):
                continue
            try:
                out = _iterate(problem, cfg, chance, dispersion, r_ref, r_taus, r_hist, on_iteration, "min-time")
            except (InfeasibleError, SolverFailure, uq.SingularTransferError) as exc:
                errors.append(exc)
                continue
            timed.append((*out, r_hist))
        if not timed:
            raise errors[-1]
        ref, taus, converged, history = min(timed, key=lambda r: (not r[2], r[0].tf))
    buffers = compute_buffers(ref, dispersion, taus, chance.c)
    if not converged:
        warnings.warn(f"SCP did not converge in {cfg.max_iters} iterations; returning the last accepted iterate")
    safety = safety_report(ref, dispersion, chance)
    return ScpResult(ref, history, safety, buffers, converged, problem, cfg, chance, time.perf_counter() - t_start)


def _violation(traj: NominalTrajectory, buffers: BufferField, r_kos: float) -> float:
    """Total nonlinear keep-out violation [m] over the grid."""
    return float(np.clip(-drift_clearance(traj, buffers, r_kos), 0.0, None).sum())


def _iterate(problem, cfg, chance, dispersion, ref, taus, history, on_iteration, phase=""):
    c = chance.c
    dense = chance.dense_grid()

    def merit(traj):
        # the buffers depend on the trajectory, so each candidate is scored
        # with its own; keep-out violation is priced like subproblem slack
        buf = compute_buffers(traj, dispersion, taus, c)
        viol = _violation(traj, buf, chance.r_kos)
        return _objective(traj, cfg) + cfg.slack_penalty * viol, viol, buf

    def record(it, stage, accepted, traj, base, m, dmax, phi, t0, buffers):
        viol = float(max(-drift_clearance(traj, buffers, chance.r_kos).min(initial=0.0), 0.0))
        rec = IterationRecord(
            it, phase, stage, accepted, _objective(traj, cfg), base, m, traj.total_dv, traj.tf, dmax, viol, phi,
            int(buffers.taus.size), time.perf_counter() - t0,
        )
        history.append(rec)
        log.info("scp %s", rec.to_json())
        if on_iteration is not None:
            on_iteration(rec)

    t0 = time.perf_counter()
    if ref is None:
        ref = _reference_from_line(problem, cfg)
        buffers = compute_buffers(ref, dispersion, taus, c)
        ref = _clean(_solve_stage(ref, buffers, problem, cfg, chance, INIT)[0], problem, cfg)
        M, viol, buffers = merit(ref)
        record(0, INIT, True, ref, M, M, 0.0, cfg.phi, t0, buffers)

    def dense_safe(traj):
        clr = drift_clearance(traj, compute_buffers(traj, dispersion, dense, c), chance.r_kos)
        return clr, clr.min(initial=np.inf) > -_SLACK_TOL_M

    def refine(clr):
        # add each node's tightest dense drift time, violated or nearly so
        add = sorted({float(dense[int(np.argmin(row))]) for row in clr if row.min() < 1.0})
        log.info("dense drift check failed; adding tau = %s s to the grid", add)
        return np.unique(np.concatenate([taus, add]))

    # Last iterate that passed the dense check. Grid times are dense times,
    # so it stays feasible after refinement and is the restart point.
    safe_ref = ref if dense_safe(ref)[1] else None
    refinements = 0
    converged = False
    it = 0
    while True:
        phi = cfg.phi
        converged = False
        M_ref, viol_ref, buffers = merit(ref)
        while it < cfg.max_iters - 1:
            it += 1
            t0 = time.perf_counter()
            trials = []
            try:
                base = _clean(_solve_stage(ref, buffers, problem, cfg, chance, FIXED)[0], problem, cfg)
                trials.append(base)
                bb = with_slopes(compute_buffers(base, dispersion, taus, c), base, dispersion, c)
                step = _solve_stage(base, bb, problem, cfg, chance, SCVX, phi)[0]
                sb = compute_buffers(_clean(step, problem, cfg), dispersion, taus, c)
                trials.append(_clean(_solve_stage(step, sb, problem, cfg, chance, FIXED)[0], problem, cfg))
            except (InfeasibleError, SolverFailure, uq.SingularTransferError) as exc:
                log.debug("subproblem failed: %s", exc)
            scored = [(merit(t), t) for t in trials]
            scored = [(m, t) for m, t in scored if np.isfinite(m[0])]
            best = min(scored, key=lambda x: x[0][0]) if scored else None
            gain = M_ref - best[0][0] if best is not None else -np.inf
            small = cfg.tol_obj * max(abs(_objective(ref, cfg)), 1e-12)
            if gain > (0.0 if viol_ref <= _SLACK_TOL_M else 1e-9 * abs(M_ref)):
                (M, viol, buf), cand = best
                if viol_ref <= _SLACK_TOL_M and gain <= small:
                    # stationary objective: moving the intervals buys nothing
                    record(it, SCVX, True, ref, M_ref, M_ref, 0.0, phi, t0, buffers)
                    converged = True
                    break
                dmax = float(np.max(np.abs(cand.dt - ref.dt) / ref.dt))
                if viol <= _SLACK_TOL_M:
                    clr, ok = dense_safe(cand)
                    if ok:
                        safe_ref = cand
                    elif safe_ref is not None and refinements < cfg.max_refinements:
                        # the step slipped between grid times: refine now and
                        # retry from the safe iterate with the same trust region
                        record(it, SCVX, False, cand, M_ref, M, dmax, phi, t0, buf)
                        taus = refine(clr)
                        refinements += 1
                        ref = safe_ref
                        M_ref, viol_ref, buffers = merit(ref)
                        continue
                record(it, SCVX, True, cand, M_ref, M, dmax, phi, t0, buf)
                ref, M_ref, viol_ref, buffers = cand, M, viol, buf
                if dmax < cfg.tol_dt and gain <= small and viol_ref <= _SLACK_TOL_M:
                    converged = True
                    break
                if dmax >= 0.9 * phi:
                    # the step ran into the trust region and still paid off
                    phi = min(2.0 * phi, cfg.phi)
            else:
                record(it, SCVX, False, ref, M_ref, M_ref, 0.0, phi, t0, buffers)
                phi *= 0.5
                if phi < cfg.tol_dt:
                    converged = True
                    break
        if viol_ref > _SLACK_TOL_M:
            if safe_ref is None:
                raise InfeasibleError(
                    f"no drift-safe trajectory found: {viol_ref:.3g} m of keep-out slack remains",
                    {"stage": "terminal", "slack_m": viol_ref, "n_nodes": problem.n_nodes, "iterations": it},
                )
            ref, converged = safe_ref, False
        # dense post-hoc check of the nonlinear drift constraint
        clr, ok = dense_safe(ref)
        if ok:
            break
        if refinements >= cfg.max_refinements or it >= cfg.max_iters - 1:
            if safe_ref is not None:
                ref, converged = safe_ref, False
            break
        taus = refine(clr)
        refinements += 1
        if safe_ref is not None:
            ref = safe_ref
    return ref, taus, converged


@dataclass
class GridSearchResult:
    best: ScpResult
    table: dict[int, dict]


def grid_search_burn_count(
    problem: TransferProblem,
    cfg: ScpConfig,
    chance: ChanceConfig,
    dispersion: uq.DispersionConfig | None,
    N_range,
) -> GridSearchResult:
    """Run :func:`solve_scp` for every node count; keep the best converged one.

    Ties go to the smaller node count.
    """
    N_range = sorted({int(N) for N in N_range})
    if not N_range:
        raise ValueError("N_range is empty")
    if N_range[0] < 2:
        raise ValueError("every N must be at least 2")
    table: dict[int, dict] = {}
    best = None
    for N in N_range:
        p = TransferProblem(problem.ctx, problem.r_i, problem.v_i, problem.r_f, problem.v_f, N)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = solve_scp(p, cfg, chance, dispersion)
        except (InfeasibleError, SolverFailure, uq.SingularTransferError) as exc:
            table[N] = {"status": "infeasible", "reason": str(exc)}
            continue
        table[N] = {
            "status": "converged" if res.converged else "not_converged",
            "objective": res.objective,
            "total_dv_mps": res.trajectory.total_dv,
            "tf_s": res.trajectory.tf,
            "safe": res.safety.passed,
        }
        if res.converged and res.safety.passed and (best is None or res.objective < best.objective - 1e-9 * abs(best.objective)):
            best = res
    if best is None:
        raise InfeasibleError("no node count produced a converged, drift-safe trajectory", {"table": table})
    return GridSearchResult(best, table)
