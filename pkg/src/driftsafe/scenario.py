"""Scenario files: JSON with explicit unit suffixes, resolved to SI.

Every dimensioned field carries its unit in the key (``t_safe_h``,
``r_kos_m``, ``semimajor_axis_km`` ...). Exactly one unit variant of a
quantity may appear. :func:`load_scenario` validates and converts;
:meth:`Scenario.to_dict` writes the resolved scenario back in canonical
SI keys, so resolving a resolved file changes nothing.

Top-level sections: ``orbit``, ``endpoints``, ``waypoints``, ``chance``,
``dispersion``, ``scp``, ``uq``, ``seed``, ``output_dir``. See the files
under ``scenarios/`` for complete examples.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import scp, uq
from .stochastics import GatesParams, NavProfile, isotropic_covariance, psd_sqrt

log = logging.getLogger(__name__)

LENGTH = {"_m": 1.0, "_km": 1000.0}
SPEED = {"_mps": 1.0, "_kmps": 1000.0, "_cmps": 0.01, "_mmps": 0.001}
TIME = {"_s": 1.0, "_min": 60.0, "_h": 3600.0}
ANGLE = {"_rad": 1.0, "_deg": np.pi / 180.0}
MU = {"_m3_s2": 1.0, "_km3_s2": 1e9}
RATE = {"_rad_s": 1.0}

DEFAULT_BETA = 0.99
DEFAULT_T_SAFE = 86400.0
DEFAULT_TRIALS = 5000
DEFAULT_CONFIDENCE = 3.0

OBJECTIVES = {"fuel": scp.MIN_FUEL, "time": scp.MIN_TIME, scp.MIN_FUEL: scp.MIN_FUEL, scp.MIN_TIME: scp.MIN_TIME}


class ScenarioError(ValueError):
    """Schema violation; the message names the field and the expected unit."""


# --------------------------------------------------------------------------
# Field helpers
# --------------------------------------------------------------------------


def _section(d: dict, key: str, where: str, required: bool = False) -> dict:
    v = d.get(key)
    if v is None:
        if required:
            raise ScenarioError(f"{where}{key}: required section is missing")
        return {}
    if not isinstance(v, dict):
        raise ScenarioError(f"{where}{key}: expected an object")
    return v


def _number(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{name}: expected a number, got {v!r}")
    x = float(v)
    if not np.isfinite(x):
        raise ScenarioError(f"{name}: must be finite")
    return x


def _vector(v, name: str, sizes=(2, 3)) -> np.ndarray:
    if not isinstance(v, list) or len(v) not in sizes:
        raise ScenarioError(f"{name}: expected a list of {' or '.join(map(str, sizes))} numbers")
    return np.array([_number(x, name) for x in v])


def _quantity(d: dict, base: str, units: dict, where: str, default=None, required: bool = False, vector: bool = False):
    """Read ``base`` + unit suffix from ``d`` and convert to SI."""
    found = [(base + suf, scale) for suf, scale in units.items() if base + suf in d]
    if len(found) > 1:
        raise ScenarioError(f"{where}{base}: give only one of {[k for k, _ in found]}")
    if not found:
        if base in d:
            raise ScenarioError(f"{where}{base}: unit suffix required, one of {[base + s for s in units]}")
        if required:
            raise ScenarioError(f"{where}{base}: required, expected one of {[base + s for s in units]}")
        return default
    key, scale = found[0]
    v = d[key]
    if v is None:
        return default
    if vector:
        return _vector(v, where + key) * scale
    return _number(v, where + key) * scale


def _check_keys(d: dict, allowed: set, where: str) -> None:
    extra = sorted(k for k in d if k not in allowed and not k.startswith("_"))
    if extra:
        raise ScenarioError(f"{where}{extra[0]}: unknown field")


def _keys(*pairs) -> set:
    out = set()
    for base, units in pairs:
        out |= {base + s for s in units}
    return out


def _pad3(v: np.ndarray) -> np.ndarray:
    return np.concatenate([v, np.zeros(3 - v.size)]) if v.size < 3 else v


# --------------------------------------------------------------------------
# Scenario
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    """A fully resolved study definition in SI units."""

    name: str
    ctx: dyn.OrbitContext
    x_i: np.ndarray | None = None  # 6-vector initial state
    x_f: np.ndarray | None = None
    waypoints: list[uq.Waypoint] = field(default_factory=list)
    chance: scp.ChanceConfig | None = None
    dispersion: uq.DispersionConfig | None = None
    scp_cfg: scp.ScpConfig = field(default_factory=scp.ScpConfig)
    n_nodes: int = 4
    n_range: list[int] | None = None
    trials: int = DEFAULT_TRIALS
    mode: str = uq.LINCOV
    dt_out: float = 60.0
    workers: int = 1
    seed: int = 0
    output_dir: str = "out"
    nav_knots: list[dict] = field(default_factory=list)

    @property
    def has_endpoints(self) -> bool:
        return self.x_i is not None and self.x_f is not None

    def transfer_problem(self, n_nodes: int | None = None) -> scp.TransferProblem:
        if not self.has_endpoints:
            raise ScenarioError("endpoints: required for optimization (or give at least two waypoints)")
        return scp.TransferProblem(
            self.ctx, self.x_i[:2], self.x_i[3:5], self.x_f[:2], self.x_f[3:5], n_nodes or self.n_nodes
        )

    def to_dict(self) -> dict:
        """Resolved scenario with canonical SI keys; reloads to an equal scenario."""
        out: dict = {"name": self.name, "orbit": {"mean_motion_rad_s": self.ctx.n}}
        if self.ctx.a is not None:
            out["orbit"] = {"semimajor_axis_m": self.ctx.a, "mu_m3_s2": self.ctx.mu}
        if self.has_endpoints:
            out["endpoints"] = {
                "r_i_m": self.x_i[:3].tolist(),
                "v_i_mps": self.x_i[3:].tolist(),
                "r_f_m": self.x_f[:3].tolist(),
                "v_f_mps": self.x_f[3:].tolist(),
            }
        if self.waypoints:
            out["waypoints"] = [
                {
                    "label": w.label,
                    "position_m": w.state[:3].tolist(),
                    "velocity_mps": w.state[3:].tolist(),
                    "transfer_time_s": w.transfer_time,
                    "hold_time_s": w.hold_time,
                }
                for w in self.waypoints
            ]
        if self.chance is not None:
            c = self.chance
            out["chance"] = {
                "r_kos_m": c.r_kos,
                "beta": c.beta,
                "t_safe_s": c.t_safe,
                "gamma_s": c.gamma,
                "gamma_verify_s": c.gamma_verify,
            }
        if self.dispersion is not None:
            d = self.dispersion
            g = d.gates
            disp = {
                "P_x0": {"covariance_si": d.P_x0.tolist()},
                "nav": {"tau_s": d.nav.tau, "knots": [dict(k) for k in self.nav_knots]},
                "gates": {
                    "sigma_s": g.sigma_s,
                    "sigma_p_rad": g.sigma_p,
                    "sigma_r_mps": g.sigma_r,
                    "sigma_a_mps": g.sigma_a,
                },
                "correlated": d.gates_tau > 0,
                "confidence": d.confidence,
                "hybrid_samples": d.hybrid_samples,
            }
            if d.gates_tau > 0:
                disp["gates"]["tau_s"] = d.gates_tau
            if np.isinf(d.nav.tau):
                disp["nav"]["tau_s"] = None
            out["dispersion"] = disp
        cfg = self.scp_cfg
        s = {
            "objective": cfg.objective,
            "tf0_s": cfg.tf0,
            "tf_max_s": cfg.tf_max,
            "tf_fixed": cfg.tf_fixed,
            "dv_max_mps": cfg.dv_max,
            "dt_min_s": cfg.dt_min,
            "phi": cfg.phi,
            "max_iters": cfg.max_iters,
            "tol_dt": cfg.tol_dt,
            "tol_obj": cfg.tol_obj,
            "prescribed_m": {str(k): list(v) for k, v in sorted(cfg.waypoints.items())},
        }
        if self.n_range:
            s["N_range"] = list(self.n_range)
        else:
            s["N"] = self.n_nodes
        out["scp"] = s
        out["uq"] = {"trials": self.trials, "mode": self.mode, "dt_out_s": self.dt_out, "workers": self.workers}
        out["seed"] = self.seed
        out["output_dir"] = self.output_dir
        return out


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(data, default_name=path.stem)


def scenario_from_dict(data: dict, default_name: str = "scenario") -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario: expected a JSON object")
    _check_keys(
        data,
        {"name", "description", "orbit", "endpoints", "waypoints", "chance", "dispersion", "scp", "uq", "seed", "output_dir"},
        "",
    )
    ctx = _orbit(_section(data, "orbit", "", required=True))
    waypoints = _waypoints(data.get("waypoints"))
    x_i, x_f = _endpoints(_section(data, "endpoints", ""), waypoints)
    chance = _chance(data["chance"]) if "chance" in data else None
    dispersion, knots = _dispersion(data["dispersion"]) if "dispersion" in data else (None, [])
    cfg, n_nodes, n_range = _scp(_section(data, "scp", ""), waypoints)
    u = _section(data, "uq", "")
    _check_keys(u, {"trials", "mode", "workers"} | _keys(("dt_out", TIME)), "uq.")
    trials = int(_number(u.get("trials", DEFAULT_TRIALS), "uq.trials"))
    mode = u.get("mode", uq.LINCOV)
    mode = {"mc": uq.MONTECARLO}.get(mode, mode)
    if mode not in uq.MODES:
        raise ScenarioError(f"uq.mode: expected one of {list(uq.MODES)}, got {mode!r}")
    if trials < 0:
        raise ScenarioError("uq.trials: must be non-negative")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ScenarioError("seed: expected an unsigned 64-bit integer")
    out_dir = data.get("output_dir", "out")
    if not isinstance(out_dir, str):
        raise ScenarioError("output_dir: expected a string")
    return Scenario(
        name=str(data.get("name", default_name)),
        ctx=ctx,
        x_i=x_i,
        x_f=x_f,
        waypoints=waypoints,
        chance=chance,
        dispersion=dispersion,
        scp_cfg=cfg,
        n_nodes=n_nodes,
        n_range=n_range,
        trials=trials,
        mode=mode,
        dt_out=_quantity(u, "dt_out", TIME, "uq.", default=60.0),
        workers=int(_number(u.get("workers", 1), "uq.workers")),
        seed=int(seed),
        output_dir=out_dir,
        nav_knots=knots,
    )


def _orbit(o: dict) -> dyn.OrbitContext:
    _check_keys(o, _keys(("semimajor_axis", LENGTH), ("mu", MU), ("mean_motion", RATE)), "orbit.")
    a = _quantity(o, "semimajor_axis", LENGTH, "orbit.")
    n = _quantity(o, "mean_motion", RATE, "orbit.")
    if (a is None) == (n is None):
        raise ScenarioError("orbit: give exactly one of semimajor_axis_km/_m or mean_motion_rad_s")
    try:
        if a is not None:
            mu = _quantity(o, "mu", MU, "orbit.", default=dyn.MU_EARTH)
            return dyn.OrbitContext.from_semimajor_axis(a, mu)
        if "mu_m3_s2" in o or "mu_km3_s2" in o:
            raise ScenarioError("orbit.mu: only meaningful with a semimajor axis")
        return dyn.OrbitContext(n=n)
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"orbit: {exc}") from None


def _waypoints(rows) -> list[uq.Waypoint]:
    if rows is None:
        return []
    if not isinstance(rows, list):
        raise ScenarioError("waypoints: expected a list of rows")
    allowed = {"label"} | _keys(("position", LENGTH), ("velocity", SPEED), ("transfer_time", TIME), ("hold_time", TIME))
    out = []
    for i, w in enumerate(rows):
        where = f"waypoints[{i}]."
        if not isinstance(w, dict):
            raise ScenarioError(f"waypoints[{i}]: expected an object")
        _check_keys(w, allowed, where)
        r = _pad3(_quantity(w, "position", LENGTH, where, required=True, vector=True))
        v = _pad3(_quantity(w, "velocity", SPEED, where, default=np.zeros(3), vector=True))
        tt = _quantity(w, "transfer_time", TIME, where, default=0.0)
        hold = _quantity(w, "hold_time", TIME, where, default=0.0)
        if tt < 0 or hold < 0:
            raise ScenarioError(f"{where}transfer_time/hold_time: must be non-negative")
        out.append(uq.Waypoint(str(w.get("label", f"WP{i}")), np.concatenate([r, v]), tt, hold))
    labels = [w.label for w in out]
    if len(set(labels)) != len(labels):
        raise ScenarioError("waypoints: labels must be unique")
    return out


def _endpoints(e: dict, waypoints: list[uq.Waypoint]):
    _check_keys(e, _keys(("r_i", LENGTH), ("v_i", SPEED), ("r_f", LENGTH), ("v_f", SPEED)), "endpoints.")
    if not e:
        if len(waypoints) >= 2:
            return waypoints[0].state.copy(), waypoints[-1].state.copy()
        return None, None
    vals = {}
    for k, units in (("r_i", LENGTH), ("v_i", SPEED), ("r_f", LENGTH), ("v_f", SPEED)):
        vals[k] = _pad3(_quantity(e, k, units, "endpoints.", required=True, vector=True))
    return np.concatenate([vals["r_i"], vals["v_i"]]), np.concatenate([vals["r_f"], vals["v_f"]])


def _chance(c) -> scp.ChanceConfig:
    if not isinstance(c, dict):
        raise ScenarioError("chance: expected an object")
    _check_keys(c, {"beta"} | _keys(("r_kos", LENGTH), ("t_safe", TIME), ("gamma", TIME), ("gamma_verify", TIME)), "chance.")
    r_kos = _quantity(c, "r_kos", LENGTH, "chance.", required=True)
    if "beta" in c:
        beta = _number(c["beta"], "chance.beta")
    else:
        beta = DEFAULT_BETA
        log.warning("chance.beta not given; using the default %.2f", DEFAULT_BETA)
    try:
        return scp.ChanceConfig(
            r_kos=r_kos,
            beta=beta,
            t_safe=_quantity(c, "t_safe", TIME, "chance.", default=DEFAULT_T_SAFE),
            gamma=_quantity(c, "gamma", TIME, "chance.", default=600.0),
            gamma_verify=_quantity(c, "gamma_verify", TIME, "chance.", default=60.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"chance: {exc}") from None


def _covariance_spec(d, where: str) -> np.ndarray:
    """Either ``covariance_si`` (6x6, SI) or per-axis 1-sigma or 3-sigma RSS shorthand."""
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    _check_keys(
        d,
        {"covariance_si"} | _keys(("sigma_pos", LENGTH), ("sigma_vel", SPEED), ("pos_rss_3sigma", LENGTH), ("vel_rss_3sigma", SPEED)),
        where + ".",
    )
    if "covariance_si" in d:
        M = d["covariance_si"]
        if not (isinstance(M, list) and len(M) == 6 and all(isinstance(r, list) and len(r) == 6 for r in M)):
            raise ScenarioError(f"{where}.covariance_si: expected a 6x6 nested list in m, m/s units")
        P = np.array([[_number(x, where + ".covariance_si") for x in r] for r in M])
    elif any(k.startswith("sigma_pos") for k in d):
        sp = _quantity(d, "sigma_pos", LENGTH, where + ".", required=True)
        sv = _quantity(d, "sigma_vel", SPEED, where + ".", required=True)
        P = np.diag([sp**2] * 3 + [sv**2] * 3)
    else:
        rp = _quantity(d, "pos_rss_3sigma", LENGTH, where + ".", required=True)
        rv = _quantity(d, "vel_rss_3sigma", SPEED, where + ".", required=True)
        P = isotropic_covariance(rp, rv)
    if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ScenarioError(f"{where}: covariance must be symmetric")
    try:
        psd_sqrt(P, where)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    return P


def _dispersion(d) -> tuple[uq.DispersionConfig, list[dict]]:
    if not isinstance(d, dict):
        raise ScenarioError("dispersion: expected an object")
    _check_keys(d, {"P_x0", "nav", "gates", "correlated", "confidence", "hybrid_samples"}, "dispersion.")
    P0 = _covariance_spec(d.get("P_x0", {"sigma_pos_m": 0.0, "sigma_vel_mps": 0.0}), "dispersion.P_x0")
    nav = _section(d, "nav", "dispersion.")
    _check_keys(nav, {"knots"} | _keys(("tau", TIME)), "dispersion.nav.")
    tau = _quantity(nav, "tau", TIME, "dispersion.nav.", default=np.inf)
    knots_in = nav.get("knots", [])
    if not isinstance(knots_in, list):
        raise ScenarioError("dispersion.nav.knots: expected a list")
    times, covs, knots = [], [], []
    for i, k in enumerate(knots_in):
        where = f"dispersion.nav.knots[{i}]"
        if not isinstance(k, dict):
            raise ScenarioError(f"{where}: expected an object")
        spec = {kk: vv for kk, vv in k.items() if not any(kk == "t" + s for s in TIME)}
        t = _quantity(k, "t", TIME, where + ".", required=True)
        P = _covariance_spec(spec, where)
        times.append(t)
        covs.append(P)
        knots.append({"t_s": t, "covariance_si": P.tolist()})
    try:
        profile = NavProfile(times, covs, tau=tau) if times else NavProfile.zero()
    except ValueError as exc:
        raise ScenarioError(f"dispersion.nav: {exc}") from None
    if not times:
        knots = [{"t_s": 0.0, "covariance_si": np.zeros((6, 6)).tolist()}]
    g = _section(d, "gates", "dispersion.")
    _check_keys(g, {"sigma_s"} | _keys(("sigma_p", ANGLE), ("sigma_r", SPEED), ("sigma_a", SPEED), ("tau", TIME)), "dispersion.gates.")
    try:
        gates = GatesParams(
            sigma_s=_number(g.get("sigma_s", 0.0), "dispersion.gates.sigma_s"),
            sigma_p=_quantity(g, "sigma_p", ANGLE, "dispersion.gates.", default=0.0),
            sigma_r=_quantity(g, "sigma_r", SPEED, "dispersion.gates.", default=0.0),
            sigma_a=_quantity(g, "sigma_a", SPEED, "dispersion.gates.", default=0.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"dispersion.gates: {exc}") from None
    correlated = d.get("correlated", False)
    if not isinstance(correlated, bool):
        raise ScenarioError("dispersion.correlated: expected true or false")
    gates_tau = _quantity(g, "tau", TIME, "dispersion.gates.", default=None)
    if correlated and not gates_tau:
        raise ScenarioError("dispersion.gates.tau_s: required (positive) when correlated is true")
    cfg = uq.DispersionConfig(
        P_x0=P0,
        nav=profile,
        gates=gates,
        gates_tau=float(gates_tau) if correlated else 0.0,
        confidence=_number(d.get("confidence", DEFAULT_CONFIDENCE), "dispersion.confidence"),
        hybrid_samples=int(_number(d.get("hybrid_samples", 2000), "dispersion.hybrid_samples")),
    )
    return cfg, knots


def _scp(s: dict, waypoints: list[uq.Waypoint]):
    allowed = {"objective", "tf_fixed", "N", "N_range", "phi", "max_iters", "tol_dt", "tol_obj", "prescribed", "time_starts"}
    allowed |= _keys(("tf0", TIME), ("tf_max", TIME), ("dv_max", SPEED), ("dt_min", TIME), ("prescribed", LENGTH))
    _check_keys(s, allowed, "scp.")
    obj = s.get("objective", "fuel")
    if obj not in OBJECTIVES:
        raise ScenarioError(f"scp.objective: expected 'fuel' or 'time', got {obj!r}")
    prescribed = {}
    by_label = {w.label: w for w in waypoints}
    if "prescribed" in s:
        # node index -> waypoint label
        p = s["prescribed"]
        if not isinstance(p, dict):
            raise ScenarioError("scp.prescribed: expected an object mapping node index to waypoint label")
        for k, label in p.items():
            if label not in by_label:
                raise ScenarioError(f"scp.prescribed.{k}: unknown waypoint label {label!r}")
            prescribed[_node(k, "scp.prescribed")] = tuple(by_label[label].state[:2])
    for suf, scale in LENGTH.items():
        p = s.get("prescribed" + suf)
        if p is None:
            continue
        if not isinstance(p, dict):
            raise ScenarioError(f"scp.prescribed{suf}: expected an object mapping node index to a position")
        for k, r in p.items():
            prescribed[_node(k, "scp.prescribed" + suf)] = tuple(_vector(r, f"scp.prescribed{suf}.{k}", (2,)) * scale)
    n_nodes = int(_number(s.get("N", 4), "scp.N"))
    n_range = s.get("N_range")
    if n_range is not None:
        if not isinstance(n_range, list) or not n_range:
            raise ScenarioError("scp.N_range: expected a non-empty list of node counts")
        n_range = [int(_number(v, "scp.N_range")) for v in n_range]
        if min(n_range) < 2:
            raise ScenarioError("scp.N_range: every node count must be at least 2")
    if n_nodes < 2:
        raise ScenarioError("scp.N: must be at least 2")
    bad = [k for k in prescribed if not 0 < k < n_nodes - 1]
    if bad and n_range is None:
        raise ScenarioError(f"scp.prescribed: node {bad[0]} is not an interior node of N = {n_nodes}")
    tf_fixed = s.get("tf_fixed", False)
    if not isinstance(tf_fixed, bool):
        raise ScenarioError("scp.tf_fixed: expected true or false")
    defaults = scp.ScpConfig()
    try:
        cfg = scp.ScpConfig(
            objective=OBJECTIVES[obj],
            tf0=_quantity(s, "tf0", TIME, "scp.", default=defaults.tf0),
            phi=_number(s.get("phi", defaults.phi), "scp.phi"),
            max_iters=int(_number(s.get("max_iters", defaults.max_iters), "scp.max_iters")),
            tol_dt=_number(s.get("tol_dt", defaults.tol_dt), "scp.tol_dt"),
            tol_obj=_number(s.get("tol_obj", defaults.tol_obj), "scp.tol_obj"),
            tf_max=_quantity(s, "tf_max", TIME, "scp."),
            tf_fixed=tf_fixed,
            dv_max=_quantity(s, "dv_max", SPEED, "scp."),
            dt_min=_quantity(s, "dt_min", TIME, "scp.", default=defaults.dt_min),
            waypoints=prescribed,
            time_starts=int(_number(s.get("time_starts", defaults.time_starts), "scp.time_starts")),
        )
    except ValueError as exc:
        raise ScenarioError(f"scp: {exc}") from None
    return cfg, n_nodes, n_range


def _node(k, where: str) -> int:
    try:
        return int(k)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: node keys must be integers, got {k!r}") from None


def dump_scenario(sc: Scenario) -> str:
    return json.dumps(sc.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
