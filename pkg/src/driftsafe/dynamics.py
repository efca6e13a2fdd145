"""Clohessy-Wiltshire relative motion about a circular target orbit.

State ordering is fixed throughout the package:

* planar:  ``(x, y, xdot, ydot)``
* full 3-D: ``(x, y, z, xdot, ydot, zdot)``

with ``x`` radial (R-bar), ``y`` along-track (V-bar) and ``z`` cross-track.
All quantities are SI (m, m/s, s, rad).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MU_EARTH = 3.986004418e14  # m^3/s^2

PLANAR = "planar"
FULL3D = "full3d"


@dataclass(frozen=True)
class OrbitContext:
    """Reference orbit. Only the mean motion enters the dynamics."""

    n: float
    a: float | None = None
    mu: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.n) or self.n <= 0.0:
            raise ValueError(f"mean motion must be positive and finite, got {self.n}")

    @classmethod
    def from_semimajor_axis(cls, a: float, mu: float = MU_EARTH) -> "OrbitContext":
        return cls(n=mean_motion(a, mu), a=a, mu=mu)

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.n


def mean_motion(a: float, mu: float = MU_EARTH) -> float:
    """Mean motion sqrt(mu / a^3) [rad/s] of a circular orbit of radius ``a`` [m]."""
    if not (a > 0.0 and mu > 0.0):
        raise ValueError(f"semimajor axis and mu must be positive (a={a}, mu={mu})")
    return float(np.sqrt(mu / a**3))


def _dim(mode: str) -> int:
    if mode == PLANAR:
        return 4
    if mode == FULL3D:
        return 6
    raise ValueError(f"unknown mode {mode!r}; expected {PLANAR!r} or {FULL3D!r}")


def plant_matrix(ctx: OrbitContext, mode: str = PLANAR) -> np.ndarray:
    """Continuous-time CW plant matrix A (4x4 planar or 6x6)."""
    n = ctx.n
    if _dim(mode) == 4:
        return np.array(
            [
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
                [3 * n**2, 0.0, 0.0, 2 * n],
                [0.0, 0.0, -2 * n, 0.0],
            ]
        )
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3, 0] = 3 * n**2
    A[3, 4] = 2 * n
    A[4, 3] = -2 * n
    A[5, 2] = -(n**2)
    return A


def control_matrix(mode: str = PLANAR) -> np.ndarray:
    """Impulse input matrix B = [0; I]."""
    d = _dim(mode) // 2
    return np.vstack([np.zeros((d, d)), np.eye(d)])


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not np.isfinite(dt):
        raise ValueError(f"time step must be finite, got {dt}")
    return dt


def stm(dt: float, ctx: OrbitContext, mode: str = PLANAR) -> np.ndarray:
    """Closed-form CW state transition matrix Phi(dt).

    Valid for any real ``dt`` (negative values propagate backward).
    The 6x6 form places the planar matrix on the in-plane rows/columns
    and the cross-track harmonic oscillator on ``(z, zdot)``.
    """
    dt = _check_dt(dt)
    dim = _dim(mode)
    n = ctx.n
    nt = n * dt
    s, c = np.sin(nt), np.cos(nt)
    planar = np.array(
        [
            [4 - 3 * c, 0.0, s / n, 2 * (1 - c) / n],
            [6 * (s - nt), 1.0, -2 * (1 - c) / n, (4 * s - 3 * nt) / n],
            [3 * n * s, 0.0, c, 2 * s],
            [-6 * n * (1 - c), 0.0, -2 * s, 4 * c - 3],
        ]
    )
    if dim == 4:
        return planar
    return _embed(planar, np.array([[c, s / n], [-n * s, c]]))


def stm_dt_derivative(dt: float, ctx: OrbitContext, mode: str = PLANAR) -> np.ndarray:
    """Entrywise derivative dPhi/d(dt); identical to A @ Phi(dt)."""
    dt = _check_dt(dt)
    dim = _dim(mode)
    n = ctx.n
    nt = n * dt
    s, c = np.sin(nt), np.cos(nt)
    planar = np.array(
        [
            [3 * n * s, 0.0, c, 2 * s],
            [6 * n * (c - 1), 0.0, -2 * s, 4 * c - 3],
            [3 * n**2 * c, 0.0, -n * s, 2 * n * c],
            [-6 * n**2 * s, 0.0, -2 * n * c, -4 * n * s],
        ]
    )
    if dim == 4:
        return planar
    return _embed(planar, np.array([[-n * s, c], [-(n**2) * c, -n * s]]))


def _embed(planar: np.ndarray, cross: np.ndarray) -> np.ndarray:
    # planar index -> 3-D index: x->0, y->1, xdot->3, ydot->4
    idx = [0, 1, 3, 4]
    out = np.zeros((6, 6))
    out[np.ix_(idx, idx)] = planar
    out[np.ix_([2, 5], [2, 5])] = cross
    return out


def stm_position_rows(tau: float, ctx: OrbitContext, mode: str = PLANAR) -> np.ndarray:
    """Position rows ``[I 0] @ Phi(tau)`` (2x4 planar, 3x6 full)."""
    d = _dim(mode) // 2
    return stm(tau, ctx, mode)[:d]


def stm_blocks(dt: float, ctx: OrbitContext, mode: str = FULL3D):
    """Return ``(Phi_rr, Phi_rv, Phi_vr, Phi_vv)`` partitions of Phi(dt)."""
    P = stm(dt, ctx, mode)
    d = P.shape[0] // 2
    return P[:d, :d], P[:d, d:], P[d:, :d], P[d:, d:]


def propagate(state, dt: float, ctx: OrbitContext, impulse=None) -> np.ndarray:
    """Coast ``state`` for ``dt`` seconds, then add ``impulse`` to the velocity.

    The mode is inferred from the state length (4 or 6).
    """
    x = np.asarray(state, dtype=float)
    if x.shape not in ((4,), (6,)):
        raise ValueError(f"state must have length 4 or 6, got shape {x.shape}")
    mode = PLANAR if x.size == 4 else FULL3D
    out = stm(dt, ctx, mode) @ x
    if impulse is not None:
        dv = np.asarray(impulse, dtype=float)
        if dv.shape != (x.size // 2,):
            raise ValueError(f"impulse must have length {x.size // 2}, got shape {dv.shape}")
        out[x.size // 2 :] += dv
    return out


def planar_to_3d(state) -> np.ndarray:
    """Embed a planar state with zero cross-track motion."""
    x, y, vx, vy = np.asarray(state, dtype=float)
    return np.array([x, y, 0.0, vx, vy, 0.0])


def state3_to_planar(state) -> np.ndarray:
    s = np.asarray(state, dtype=float)
    return s[[0, 1, 3, 4]].copy()
