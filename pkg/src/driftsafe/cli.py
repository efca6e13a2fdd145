"""Command-line interface.

    driftsafe target       --scenario S [--out DIR] [--plots]
    driftsafe optimize     --scenario S [--objective fuel|time] [--plots]
    driftsafe disperse     --scenario S [--plan PLAN] [--mode lincov|hybrid|mc] [--trials N] [--seed U64]
    driftsafe drift-verify --scenario S [--plan PLAN]
    driftsafe report       --out DIR

Exit codes: 0 ok, 2 schema error, 3 infeasible, 4 safety check failed,
5 numerical error. Set ``DRIFTSAFE_LOG`` (e.g. ``INFO``) for logging.
Every file is written atomically; when a command dies part way, the
files it already wrote get a ``.failed`` suffix.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import scp, uq
from .scenario import Scenario, ScenarioError, dump_scenario, load_scenario

log = logging.getLogger("driftsafe")

EXIT_OK, EXIT_SCHEMA, EXIT_INFEASIBLE, EXIT_UNSAFE, EXIT_NUMERICAL = 0, 2, 3, 4, 5

TRAJECTORY_COLUMNS = ["t_s", "x_m", "y_m", "z_m", "vx_mps", "vy_mps", "vz_mps", "event"]
PLAN_FORMAT = "driftsafe.plan/1"


# --------------------------------------------------------------------------
# Output handling
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Outputs:
    """Atomic writes into one directory; :meth:`fail` flags what was written."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def write_bytes(self, name: str, data: bytes) -> Path:
        target = self.root / name
        tmp = self.root / f".{name}.{os.getpid()}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, target)
        stale = self.root / (name + ".failed")
        if stale.exists():
            stale.unlink()
        self.written.append(name)
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode())

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        return self.write_text(name, buf.getvalue())

    def fail(self) -> None:
        for name in self.written:
            p = self.root / name
            if p.exists():
                os.replace(p, self.root / (name + ".failed"))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --------------------------------------------------------------------------
# Plans and trajectories
# --------------------------------------------------------------------------


def plan_to_dict(plan: uq.ManeuverPlan, ctx: dyn.OrbitContext) -> dict:
    pre, post = plan.nominal_states(ctx)
    return {
        "format": PLAN_FORMAT,
        "x0_si": plan.x0.tolist(),
        "burns": [
            {
                "label": b.label,
                "t_s": b.t,
                "dv_mps": b.dv.tolist(),
                "magnitude_mps": b.magnitude,
                "pre_burn_state_si": p.tolist(),
            }
            for b, p in zip(plan.burns, pre)
        ],
        "total_dv_mps": plan.total_dv,
        "tf_s": float(plan.times[-1]) if plan.burns else 0.0,
    }


def load_plan(path) -> uq.ManeuverPlan:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"--plan: cannot read {path} ({exc})") from None
    if d.get("format") != PLAN_FORMAT:
        raise ScenarioError(f"--plan: expected format {PLAN_FORMAT!r}")
    try:
        burns = [uq.Burn(b["t_s"], b["dv_mps"], b.get("label", "")) for b in d["burns"]]
        return uq.ManeuverPlan(np.asarray(d["x0_si"], dtype=float), burns)
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError(f"--plan: malformed plan ({exc})") from None


def trajectory_rows(plan: uq.ManeuverPlan, ctx: dyn.OrbitContext, dt_out: float):
    """Nominal states on a uniform grid plus one post-burn row per burn."""
    t_end = float(plan.times[-1]) if plan.burns else 0.0
    grid = np.arange(0.0, t_end, dt_out) if dt_out > 0 else np.zeros(1)
    events = {b.t: b.label or f"burn{j + 1}" for j, b in enumerate(plan.burns)}
    times = sorted(set(grid.tolist()) | set(events))
    rows = []
    for t in times:
        x = plan.state_at(t, ctx)
        ev = events.get(t, "start" if t == 0.0 else "")
        rows.append([t, *x.tolist(), ev])
    return rows


def _waypoint_plan(sc: Scenario) -> uq.ManeuverPlan:
    if len(sc.waypoints) < 2:
        raise ScenarioError("waypoints: at least two rows are required for this command (or pass --plan)")
    try:
        return uq.two_impulse_plan(sc.waypoints, sc.ctx)
    except uq.SingularTransferError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"waypoints: {exc}") from None


def _plan_for(sc: Scenario, args) -> uq.ManeuverPlan:
    return load_plan(args.plan) if args.plan else _waypoint_plan(sc)


def _require(sc: Scenario, what: str):
    if what == "chance" and sc.chance is None:
        raise ScenarioError("chance: section required for this command")
    if what == "dispersion" and sc.dispersion is None:
        raise ScenarioError("dispersion: section required for this command")


def _burn_table(plan: uq.ManeuverPlan) -> list[dict]:
    return [
        {"label": b.label, "t_s": b.t, "t_min": b.t / 60.0, "dv_mps": b.dv.tolist(), "magnitude_mps": b.magnitude}
        for b in plan.burns
    ]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_target(sc: Scenario, args, out: Outputs) -> int:
    t0 = time.perf_counter()
    plan = _waypoint_plan(sc)
    seconds = time.perf_counter() - t0
    out.write_json("plan.json", plan_to_dict(plan, sc.ctx))
    out.write_csv("trajectory.csv", TRAJECTORY_COLUMNS, trajectory_rows(plan, sc.ctx, sc.dt_out))
    out.write_json(
        "burns.json",
        {"burns": _burn_table(plan), "total_dv_mps": plan.total_dv, "seconds": seconds},
    )
    if args.plots:
        from . import plots

        pre, _ = plan.nominal_states(sc.ctx)
        path = np.array([r[1:3] for r in trajectory_rows(plan, sc.ctx, 30.0)])
        burns = [(p[:2], b.dv[:2], b.label) for p, b in zip(pre, plan.burns)]
        r_kos = sc.chance.r_kos if sc.chance else 0.0
        out.write_bytes("trajectory.svg", plots.trajectory_figure(path, burns, r_kos, title=sc.name))
    for b in plan.burns:
        print(f"{b.label:<18s} t={b.t / 60:8.3f} min  dv=({b.dv[0]:+.4f}, {b.dv[1]:+.4f}, {b.dv[2]:+.4f})  |dv|={b.magnitude:.4f} m/s")
    print(f"total dv {plan.total_dv:.4f} m/s")
    return EXIT_OK


def _dispersion_rows(res: uq.DispersionResult):
    idx = [(i, j) for i in range(6) for j in range(i, 6)]
    header = ["t_s", "tag", "pos_rss_3sigma_m", "vel_rss_3sigma_mps"] + [f"P{i}{j}" for i, j in idx]
    rows = []
    for r in res.history:
        P = r.P[:6, :6]
        rows.append(
            [r.t, r.tag, 3 * np.sqrt(max(np.trace(P[:3, :3]), 0.0)), 3 * np.sqrt(max(np.trace(P[3:, 3:]), 0.0))]
            + [P[i, j] for i, j in idx]
        )
    return header, rows


def cmd_disperse(sc: Scenario, args, out: Outputs) -> int:
    _require(sc, "dispersion")
    plan = _plan_for(sc, args)
    mode = {"mc": uq.MONTECARLO}.get(args.mode, args.mode) if args.mode else sc.mode
    trials = sc.trials if args.trials is None else args.trials
    seed = sc.seed if args.seed is None else args.seed
    if mode == uq.MONTECARLO and trials < 1:
        raise ScenarioError("--trials: Monte Carlo needs at least one trial")
    if mode == uq.HYBRID and args.trials is None:
        trials = sc.dispersion.hybrid_samples
    t0 = time.perf_counter()
    res = uq.closed_loop_dispersion(
        plan, sc.dispersion, sc.ctx, mode=mode, trials=trials, seed=seed, dt_out=sc.dt_out, workers=args.workers or sc.workers
    )
    seconds = time.perf_counter() - t0
    header, rows = _dispersion_rows(res)
    out.write_csv("covariance.csv", header, rows)
    out.write_json(
        "dv.json",
        {
            "mode": mode,
            "trials": trials if mode != uq.LINCOV else 0,
            "seed": seed,
            "burns": [dict(label=b.label, **s.to_dict()) for b, s in zip(plan.burns, res.burn_stats)],
            "total": res.total_stats.to_dict(),
            "nominal_total_dv_mps": plan.total_dv,
        },
    )
    if res.trials is not None:
        ens = res.trials
        rows = []
        for i in range(ens.dv.shape[0]):
            for j, b in enumerate(plan.burns):
                rows.append([i, j, b.t, *ens.pre_burn[i, j].tolist(), *ens.dv[i, j].tolist()])
        out.write_csv(
            "ensemble.csv",
            # pre-burn state dispersion, then the delivered burn
            ["trial", "burn", "t_s", "dx_m", "dy_m", "dz_m", "dvx_mps", "dvy_mps", "dvz_mps",
             "burn_x_mps", "burn_y_mps", "burn_z_mps"],
            rows,
        )
    if args.plots:
        from . import plots

        tube = [(plan.state_at(r.t, sc.ctx)[:2], r.P[:2, :2]) for r in res.history if r.tag in ("coast", "post-burn")]
        path = np.array([r[1:3] for r in trajectory_rows(plan, sc.ctx, 30.0)])
        pre, _ = plan.nominal_states(sc.ctx)
        burns = [(p[:2], b.dv[:2], b.label) for p, b in zip(pre, plan.burns)]
        r_kos = sc.chance.r_kos if sc.chance else 0.0
        c = sc.dispersion.confidence
        out.write_bytes("dispersion.svg", plots.trajectory_figure(path, burns, r_kos, tube=tube, c=c, title=f"{sc.name}: {c:g}-sigma tube"))
        s = res.total_stats
        fig = plots.dv_histogram_figure(s.samples) if s.samples is not None else plots.dv_gaussian_figure(s.mean, s.std)
        out.write_bytes("dv_histogram.svg", fig)
    s = res.total_stats
    print(f"{mode}: total dv mean {s.mean:.4f} m/s, std {s.std:.4f} m/s, p99 {s.p99:.4f} m/s ({seconds:.2f} s)")
    return EXIT_OK


def _drift_outputs(report: uq.SafetyReport, out: Outputs, extra: dict | None = None):
    rows = [[c.k, c.tau, c.position[0], c.position[1], c.buffer, c.clearance] for c in report.checks]
    out.write_csv("drift.csv", ["node", "tau_s", "x_m", "y_m", "buffer_m", "clearance_m"], rows)
    nodes = {}
    for c in report.checks:
        if c.k not in nodes or c.clearance < nodes[c.k]["min_clearance_m"]:
            nodes[c.k] = {"node": c.k, "min_clearance_m": c.clearance, "tau_s": c.tau, "buffer_m": c.buffer}
    body = {**report.summary(), "nodes": [nodes[k] for k in sorted(nodes)]}
    if extra:
        body.update(extra)
    out.write_json("safety.json", body)


def cmd_drift_verify(sc: Scenario, args, out: Outputs) -> int:
    _require(sc, "chance")
    _require(sc, "dispersion")
    plan = _plan_for(sc, args)
    res = uq.closed_loop_dispersion(plan, sc.dispersion, sc.ctx, mode=uq.LINCOV)
    states, covs = uq.plan_drift_nodes(plan, res, sc.ctx)
    taus = sc.chance.dense_grid()
    report = uq.verify_drift_safety(uq.free_drift_envelope(states, covs, taus, sc.ctx), sc.chance.r_kos, sc.chance.c)
    _drift_outputs(report, out, {"beta": sc.chance.beta, "t_safe_s": sc.chance.t_safe, "gamma_s": sc.chance.gamma_verify})
    if args.plots:
        from . import plots

        clr = np.array([[c.clearance for c in report.checks if c.k == k] for k in range(len(states))])
        out.write_bytes("clearance.svg", plots.clearance_figure(taus, clr, title=f"{sc.name}: free-drift clearance"))
        drift = np.array([[dyn.stm(t, sc.ctx, dyn.FULL3D) @ x for t in taus[::5]] for x in states])[:, :, :2]
        path = np.array([r[1:3] for r in trajectory_rows(plan, sc.ctx, 30.0)])
        pre, _ = plan.nominal_states(sc.ctx)
        burns = [(p[:2], b.dv[:2], b.label) for p, b in zip(pre, plan.burns)]
        out.write_bytes("drift.svg", plots.trajectory_figure(path, burns, sc.chance.r_kos, drift=drift, title=f"{sc.name}: free drift"))
    w = report.worst
    verdict = "PASS" if report.passed else "FAIL"
    print(f"drift safety {verdict}: min clearance {w.clearance:.1f} m at node {w.k}, tau {w.tau:.0f} s (c = {report.multiplier:.4f})")
    return EXIT_OK if report.passed else EXIT_UNSAFE


def cmd_optimize(sc: Scenario, args, out: Outputs) -> int:
    _require(sc, "chance")
    cfg = sc.scp_cfg
    if args.objective:
        from dataclasses import replace

        cfg = replace(cfg, objective={"fuel": scp.MIN_FUEL, "time": scp.MIN_TIME}[args.objective])
    diag = io.StringIO()

    def on_iteration(rec):
        diag.write(rec.to_json() + "\n")

    t0 = time.perf_counter()
    table = None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if sc.n_range:
                gs = scp.grid_search_burn_count(sc.transfer_problem(), cfg, sc.chance, sc.dispersion, sc.n_range)
                res, table = gs.best, gs.table
            else:
                res = scp.solve_scp(sc.transfer_problem(), cfg, sc.chance, sc.dispersion, on_iteration=on_iteration)
    finally:
        if diag.getvalue():
            out.write_text("diagnostics.jsonl", diag.getvalue())
    for w in caught:
        log.warning("%s", w.message)
    seconds = time.perf_counter() - t0
    traj = res.trajectory
    plan = traj.to_plan([f"BR{k + 1}" for k in range(traj.n_nodes)])
    if table is not None:
        out.write_text("diagnostics.jsonl", "".join(r.to_json() + "\n" for r in res.history))
    rp, rv = traj.residuals()
    out.write_json("plan.json", plan_to_dict(plan, sc.ctx))
    out.write_csv("trajectory.csv", TRAJECTORY_COLUMNS, trajectory_rows(plan, sc.ctx, sc.dt_out))
    _drift_outputs(res.safety, out, {"beta": sc.chance.beta, "t_safe_s": sc.chance.t_safe, "gamma_s": sc.chance.gamma_verify})
    report = {
        "scenario": sc.to_dict(),
        "objective": cfg.objective,
        "converged": res.converged,
        "burns": _burn_table(plan),
        "total_dv_mps": traj.total_dv,
        "tf_s": traj.tf,
        "tf_min": traj.tf / 60.0,
        "node_residual_m": rp,
        "node_residual_mps": rv,
        "safety": res.safety.summary(),
        "iterations": len(res.history),
        "history": [r.__dict__ for r in res.history],
        "seconds": seconds,
        "burn_count_table": {str(k): v for k, v in table.items()} if table else None,
    }
    out.write_json("report.json", report)
    if args.plots:
        from . import plots

        path = np.array([r[1:3] for r in trajectory_rows(plan, sc.ctx, 30.0)])
        burns = [(x[:2], du, f"BR{k + 1}") for k, (x, du) in enumerate(zip(traj.X, traj.u))]
        out.write_bytes("trajectory.svg", plots.trajectory_figure(path, burns, sc.chance.r_kos, title=f"{sc.name}: {cfg.objective}"))
    print(
        f"{cfg.objective}: dv {traj.total_dv:.4f} m/s, tf {traj.tf / 60:.2f} min, "
        f"{'converged' if res.converged else 'NOT converged'}, drift safety {'PASS' if res.safety.passed else 'FAIL'} "
        f"({seconds:.1f} s)"
    )
    return EXIT_OK if res.safety.passed else EXIT_UNSAFE


def cmd_report(sc: Scenario | None, args, out: Outputs) -> int:
    root = out.root
    lines = [f"# Run summary: {root}", ""]
    found = False
    for name, title in (("burns.json", "Targeted plan"), ("report.json", "Optimization"), ("dv.json", "Dispersion"), ("safety.json", "Drift safety")):
        p = root / name
        if not p.exists():
            continue
        found = True
        d = json.loads(p.read_text())
        lines += [f"## {title}", ""]
        if name in ("burns.json", "report.json"):
            lines += ["| burn | t [min] | dv [m/s] | abs dv [m/s] |", "|---|---|---|---|"]
            for b in d["burns"]:
                dv = ", ".join(f"{v:+.4f}" for v in b["dv_mps"])
                lines.append(f"| {b['label']} | {b['t_s'] / 60:.3f} | ({dv}) | {b['magnitude_mps']:.4f} |")
            lines.append("")
            lines.append(f"total dv: {d['total_dv_mps']:.4f} m/s")
            if name == "report.json":
                lines.append(f"time of flight: {d['tf_min']:.2f} min; converged: {d['converged']}; iterations: {d['iterations']}")
        elif name == "dv.json":
            t = d["total"]
            lines.append(f"mode {d['mode']}: total dv mean {t['mean']:.4f} m/s, std {t['std']:.4f}, p99 {t['p99']:.4f}")
        else:
            lines.append(
                f"{'PASS' if d['passed'] else 'FAIL'}: min clearance {d['min_clearance_m']:.1f} m "
                f"(node {d['worst_node']}, tau {d['worst_tau_s']:.0f} s, multiplier {d['multiplier']:.4f})"
            )
        lines.append("")
    if not found:
        raise ScenarioError(f"--out: no command outputs found in {root}")
    text = "\n".join(lines)
    out.write_text("summary.md", text)
    print(text)
    return EXIT_OK


COMMANDS = {
    "target": cmd_target,
    "optimize": cmd_optimize,
    "disperse": cmd_disperse,
    "drift-verify": cmd_drift_verify,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftsafe", description="Passively safe rendezvous design and dispersion analysis.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--scenario", required=name != "report", help="scenario JSON file")
        s.add_argument("--out", help="output directory (default: the scenario's output_dir)")
        s.add_argument("--plots", action="store_true", help="also write SVG figures")
        if name in ("disperse", "drift-verify"):
            s.add_argument("--plan", help="plan.json from target/optimize (default: the scenario waypoints)")
        if name == "disperse":
            s.add_argument("--mode", choices=["lincov", "hybrid", "mc", "montecarlo"])
            s.add_argument("--trials", type=int)
            s.add_argument("--seed", type=_u64)
            s.add_argument("--workers", type=int)
        if name == "optimize":
            s.add_argument("--objective", choices=["fuel", "time"])
    return p


def _setup_logging() -> None:
    level = os.environ.get("DRIFTSAFE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    out = None
    try:
        sc = load_scenario(args.scenario) if args.scenario else None
        if args.command == "report" and not args.out:
            if sc is None:
                raise ScenarioError("--out or --scenario is required")
            args.out = sc.output_dir
        out = Outputs(args.out or sc.output_dir)
        if sc is not None:
            out.write_text("scenario.resolved.json", dump_scenario(sc))
        code = COMMANDS[args.command](sc, args, out)
    except ScenarioError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        code = EXIT_SCHEMA
    except scp.InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if out is not None:
            out.fail()
            out.write_json("infeasible.json", {"message": str(exc), **exc.report})
            out.written.clear()
        code = EXIT_INFEASIBLE
    except (scp.SolverFailure, uq.SingularTransferError, scp.DegenerateLinearizationError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except ValueError as exc:
        log.debug("unexpected error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    if code not in (EXIT_OK, EXIT_UNSAFE) and out is not None:
        out.fail()
    return code


if __name__ == "__main__":
    sys.exit(main())
