"""Sensitivity of the drift check and the optimized cases to t_safe.

For each horizon the waypoint plan is re-verified (c = 3, 60 s grid) and
the three optimization cases are re-solved.

    python3 scripts/horizon_sensitivity.py [--hours 0.5 1 1.0833 1.5 2]
"""

import argparse
import warnings
from dataclasses import replace
from pathlib import Path

from driftsafe import scp, uq
from driftsafe.scenario import load_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, nargs="+", default=[0.5, 1.0, 3900 / 3600, 1.5, 2.0])
    args = ap.parse_args()

    base = load_scenario(SCENARIOS / "leo_double_coelliptic.json")
    plan = uq.two_impulse_plan(base.waypoints, base.ctx)
    lc = uq.closed_loop_dispersion(plan, base.dispersion, base.ctx)
    states, covs = uq.plan_drift_nodes(plan, lc, base.ctx)
    cases = {k: load_scenario(SCENARIOS / f"leo_{k}.json") for k in ("control", "min_fuel", "min_time")}

    print(f"{'t_safe [s]':>10} {'plan':>5} {'control':>9} {'min-fuel':>9} {'saving':>7} {'min-time':>9} {'dv':>7}")
    for h in args.hours:
        t_safe = round(3600.0 * h)
        grid = uq.drift_grid(t_safe, base.chance.gamma_verify)
        ok = uq.verify_drift_safety(uq.free_drift_envelope(states, covs, grid, base.ctx), base.chance.r_kos, 3.0).passed
        res = {}
        for k, sc in cases.items():
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res[k] = scp.solve_scp(sc.transfer_problem(), sc.scp_cfg, replace(sc.chance, t_safe=t_safe), sc.dispersion)
            except (scp.InfeasibleError, scp.SolverFailure) as exc:
                res[k] = exc
        def dv(k):
            r = res[k]
            return r.trajectory.total_dv if isinstance(r, scp.ScpResult) else float("nan")
        tf = res["min_time"].trajectory.tf / 60 if isinstance(res["min_time"], scp.ScpResult) else float("nan")
        print(f"{t_safe:10.0f} {'PASS' if ok else 'FAIL':>5} {dv('control'):9.4f} {dv('min_fuel'):9.4f} "
              f"{100 * (1 - dv('min_fuel') / dv('control')):6.1f}% {tf:9.2f} {dv('min_time'):7.4f}")


if __name__ == "__main__":
    main()
