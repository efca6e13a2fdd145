"""Two-impulse targeting, dispersion analysis and drift verification.

Flies the waypoint plan of the double-coelliptic LEO scenario, prints the
burn table, compares LinCov with a Monte Carlo run and checks the free-drift
envelope against the keep-out sphere.

    python3 scripts/reproduce_uq.py [--trials 5000] [--seed 20240601]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from driftsafe import uq
from driftsafe.scenario import load_scenario

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "leo_double_coelliptic.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()

    sc = load_scenario(SCENARIO)
    plan = uq.two_impulse_plan(sc.waypoints, sc.ctx)
    print(f"{'burn':<14}{'t [min]':>9}{'dvx':>9}{'dvy':>9}{'|dv|':>9}")
    for b in plan.burns:
        print(f"{b.label:<14}{b.t / 60:9.3f}{b.dv[0]:9.4f}{b.dv[1]:9.4f}{b.magnitude:9.4f}")
    print(f"total dv {plan.total_dv:.4f} m/s\n")

    t0 = time.perf_counter()
    lc = uq.closed_loop_dispersion(plan, sc.dispersion, sc.ctx)
    t_lc = time.perf_counter() - t0
    t0 = time.perf_counter()
    mc = uq.closed_loop_dispersion(plan, sc.dispersion, sc.ctx, mode=uq.MONTECARLO, trials=args.trials, seed=args.seed)
    t_mc = time.perf_counter() - t0

    print("position 3-sigma RSS before each burn [m]")
    print(f"{'burn':<14}{'LinCov':>10}{'MC':>10}{'ratio':>8}")
    for b, Pl, Pm in zip(plan.burns, lc.pre_burn, mc.pre_burn):
        sl, sm = 3 * np.sqrt(np.trace(Pl[:3, :3])), 3 * np.sqrt(np.trace(Pm[:3, :3]))
        print(f"{b.label:<14}{sl:10.1f}{sm:10.1f}{sm / sl:8.3f}")
    print("\ncorrection dv per burn [m/s], mean / std")
    for b, sl, sm in zip(plan.burns, lc.burn_stats, mc.burn_stats):
        print(f"{b.label:<14}{sl.mean:8.4f} / {sl.std:.4f}   MC {sm.mean:8.4f} / {sm.std:.4f}")
    print(f"total: LinCov {lc.total_stats.mean:.4f} / {lc.total_stats.std:.4f}, "
          f"MC {mc.total_stats.mean:.4f} / {mc.total_stats.std:.4f} (p99 {mc.total_stats.p99:.4f})")
    print(f"runtime: LinCov {t_lc * 1e3:.1f} ms, MC {t_mc:.2f} s ({args.trials} trials)\n")

    states, covs = uq.plan_drift_nodes(plan, lc, sc.ctx)
    env = uq.free_drift_envelope(states, covs, sc.chance.dense_grid(), sc.ctx)
    for c in (3.0, sc.chance.c):
        rep = uq.verify_drift_safety(env, sc.chance.r_kos, c)
        w = rep.worst
        print(f"drift check c = {c:.3f}, r_kos {sc.chance.r_kos:.0f} m, t_safe {sc.chance.t_safe / 3600:g} h: "
              f"{'PASS' if rep.passed else 'FAIL'}, min clearance {w.clearance:.1f} m (node {w.k}, tau {w.tau / 60:.0f} min)")


if __name__ == "__main__":
    main()
