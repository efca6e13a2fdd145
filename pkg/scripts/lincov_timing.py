"""LinCov vs Monte Carlo agreement and cost as the trial count grows.

    python3 scripts/lincov_timing.py [--trials 500 1000 2000 5000 10000] [--workers 1]
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
    ap.add_argument("--trials", type=int, nargs="+", default=[500, 1000, 2000, 5000, 10000])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    sc = load_scenario(SCENARIO)
    plan = uq.two_impulse_plan(sc.waypoints, sc.ctx)
    t0 = time.perf_counter()
    for _ in range(20):
        lc = uq.closed_loop_dispersion(plan, sc.dispersion, sc.ctx)
    t_lc = (time.perf_counter() - t0) / 20
    ref = [np.trace(P[:3, :3]) for P in lc.pre_burn + lc.post_burn]
    print(f"LinCov: {t_lc * 1e3:.2f} ms")
    print(f"{'trials':>7} {'MC [s]':>8} {'LinCov share':>13} {'worst trace err':>16}")
    for n in args.trials:
        t0 = time.perf_counter()
        mc = uq.closed_loop_dispersion(plan, sc.dispersion, sc.ctx, mode=uq.MONTECARLO, trials=n, seed=args.seed, workers=args.workers)
        t_mc = time.perf_counter() - t0
        err = max(abs(np.trace(P[:3, :3]) / r - 1) for P, r in zip(mc.pre_burn + mc.post_burn, ref))
        print(f"{n:7d} {t_mc:8.2f} {100 * t_lc / t_mc:12.3f}% {100 * err:15.2f}%")


if __name__ == "__main__":
    main()
