"""Error models: exponentially correlated random variables (ECRV),
stochastic navigation errors and the Gates maneuver-execution model.

Random draws are always supplied by the caller, either as explicit
standard-normal arrays or through a ``numpy.random.Generator``. Nothing
here owns global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ZERO_BURN_MPS = 1e-9  # below this a burn fires nothing and carries no error


# --------------------------------------------------------------------------
# ECRV
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EcrvState:
    """Unit-variance first-order Gauss-Markov vector.

    ``z`` may carry leading batch dimensions (``(..., 6)``) so an ensemble
    of independent chains can be stepped at once.
    """

    z: np.ndarray
    tau: float = np.inf


def ecrv_coefficients(dt: float, tau: float) -> tuple[float, float]:
    """Return ``(decay, noise_std)`` for one ECRV step of length ``dt``.

    ``tau = inf`` is a constant bias, ``tau = 0`` is white noise.
    """
    if dt < 0:
        raise ValueError(f"ECRV step must be non-negative, got dt={dt}")
    if tau < 0:
        raise ValueError(f"ECRV time constant must be non-negative, got tau={tau}")
    if tau == 0.0:
        return 0.0, 1.0
    if np.isinf(tau):
        return 1.0, 0.0
    decay = float(np.exp(-dt / tau))
    return decay, float(np.sqrt(-np.expm1(-2.0 * dt / tau)))


def ecrv_step(state: EcrvState, dt: float, noise) -> EcrvState:
    """z' = z exp(-dt/tau) + sqrt(1 - exp(-2 dt/tau)) * noise."""
    decay, q = ecrv_coefficients(dt, state.tau)
    noise = np.asarray(noise, dtype=float)
    z = np.asarray(state.z, dtype=float)
    return EcrvState(z=decay * z + q * noise, tau=state.tau)


# --------------------------------------------------------------------------
# Navigation error
# --------------------------------------------------------------------------


def psd_sqrt(P, what: str = "covariance") -> np.ndarray:
    """Symmetric square root S with S @ S.T == P.

    Tiny negative eigenvalues (roundoff) are clipped; anything below
    ``-1e-10 * trace`` is rejected.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"{what} must be square, got shape {P.shape}")
    Ps = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(Ps)
    tol = 1e-10 * max(float(np.trace(Ps)), 0.0)
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def nearest_psd(P) -> np.ndarray:
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    w, V = np.linalg.eigh(P)
    if w.min() >= 0.0:
        return P
    return (V * np.clip(w, 0.0, None)) @ V.T


def nav_error(z, P_nav) -> np.ndarray:
    """Map unit-variance ECRV draws ``z`` (``(..., 6)``) to nav state errors."""
    S = psd_sqrt(P_nav, "nav covariance")
    return np.asarray(z, dtype=float) @ S.T


def isotropic_covariance(pos_rss_3sigma: float, vel_rss_3sigma: float, dim: int = 3) -> np.ndarray:
    """Diagonal covariance whose 3-sigma RSS position/velocity match the inputs."""
    sp = pos_rss_3sigma / 3.0 / np.sqrt(dim)
    sv = vel_rss_3sigma / 3.0 / np.sqrt(dim)
    return np.diag([sp**2] * dim + [sv**2] * dim)


@dataclass
class NavProfile:
    """Time history of the 6x6 navigation error covariance.

    Entries are interpolated linearly between knots and held constant
    outside the tabulated span.
    """

    times: np.ndarray
    covariances: np.ndarray
    tau: float = np.inf
    _sqrt_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 6, 6)
        if self.times.size != self.covariances.shape[0]:
            raise ValueError("nav profile needs one covariance per time knot")
        if self.times.size == 0:
            raise ValueError("nav profile needs at least one knot")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("nav profile times must be strictly increasing")
        for t, P in zip(self.times, self.covariances):
            if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
                raise ValueError(f"nav covariance at t={t} s is not symmetric")
            psd_sqrt(P, f"nav covariance at t={t} s")

    @classmethod
    def constant(cls, P, tau: float = np.inf) -> "NavProfile":
        return cls(times=[0.0], covariances=[P], tau=tau)

    @classmethod
    def zero(cls) -> "NavProfile":
        return cls.constant(np.zeros((6, 6)))

    def covariance(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.covariances[0].copy()
        if t >= ts[-1]:
            return self.covariances[-1].copy()
        i = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        return nearest_psd((1 - w) * self.covariances[i] + w * self.covariances[i + 1])

    def sqrt(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._sqrt_cache:
            self._sqrt_cache[key] = psd_sqrt(self.covariance(key), "nav covariance")
        return self._sqrt_cache[key]

    def rss_3sigma(self, t: float) -> tuple[float, float]:
        """(position, velocity) 3-sigma RSS at time ``t``."""
        P = self.covariance(t)
        return 3.0 * float(np.sqrt(np.trace(P[:3, :3]))), 3.0 * float(np.sqrt(np.trace(P[3:, 3:])))


# --------------------------------------------------------------------------
# Gates maneuver error model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GatesParams:
    sigma_s: float = 0.0  # proportional magnitude [-]
    sigma_p: float = 0.0  # proportional pointing [rad]
    sigma_r: float = 0.0  # fixed magnitude [m/s]
    sigma_a: float = 0.0  # fixed pointing [m/s]

    def __post_init__(self):
        for name in ("sigma_s", "sigma_p", "sigma_r", "sigma_a"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def is_zero(self) -> bool:
        return not (self.sigma_s or self.sigma_p or self.sigma_r or self.sigma_a)


def principal_frame(dv) -> np.ndarray:
    """Rotation whose columns are the principal-error axes e1, e2, e3.

    e1 is along ``dv``. e2 is built from the LVLH axis least aligned with
    e1 (first such axis on ties) so the frame is deterministic.
    """
    dv = np.asarray(dv, dtype=float)
    mag = np.linalg.norm(dv)
    if mag < ZERO_BURN_MPS:
        raise ValueError("principal-error frame is undefined for a zero burn")
    e1 = dv / mag
    k = np.zeros(3)
    k[int(np.argmin(np.abs(e1)))] = 1.0
    e2 = np.cross(e1, k)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3])


def gates_covariance(dv_nom, p: GatesParams) -> np.ndarray:
    """LVLH covariance of the Gates execution error for nominal burn ``dv_nom``.

    A burn below ``ZERO_BURN_MPS`` is not fired and has zero error.
    """
    dv_nom = np.asarray(dv_nom, dtype=float)
    mag = float(np.linalg.norm(dv_nom))
    if mag < ZERO_BURN_MPS:
        return np.zeros((3, 3))
    R = principal_frame(dv_nom)
    along = p.sigma_r**2 + mag**2 * p.sigma_s**2
    cross = p.sigma_a**2 + mag**2 * p.sigma_p**2
    P = R @ np.diag([along, cross, cross]) @ R.T
    return 0.5 * (P + P.T)


def gates_sample(dv_nom, p: GatesParams, draws) -> np.ndarray:
    """Execution error for one or many burns from standard-normal ``draws``.

    ``draws`` has shape ``(..., 8)`` ordered ``(s, u1, u2, u3, r, w1, w2, w3)``
    and is scaled here by the matching sigmas. ``dv_nom`` is ``(..., 3)`` and
    broadcasts against the draws.
    """
    dv = np.asarray(dv_nom, dtype=float)
    d = np.asarray(draws, dtype=float)
    if d.shape[-1] != 8:
        raise ValueError(f"Gates draws need 8 components, got shape {d.shape}")
    s = p.sigma_s * d[..., 0:1]
    u = p.sigma_p * d[..., 1:4]
    r = p.sigma_r * d[..., 4:5]
    w = p.sigma_a * d[..., 5:8]
    mag = np.linalg.norm(dv, axis=-1, keepdims=True)
    fired = mag >= ZERO_BURN_MPS
    unit = np.divide(dv, mag, out=np.zeros(np.broadcast_shapes(dv.shape, mag.shape)), where=fired)
    err = s * dv + np.cross(u, dv) + r * unit + np.cross(w, unit)
    return np.where(fired, err, 0.0)


def gates_draws(rng: np.random.Generator, size=()) -> np.ndarray:
    shape = (size,) if isinstance(size, int) else tuple(size)
    return rng.standard_normal(shape + (8,))
