"""Control, minimum-fuel, minimum-time and burn-count cases.

    python3 scripts/optimization_cases.py [--t-safe-h 1.0]
"""

import argparse
import warnings
from dataclasses import replace
from pathlib import Path

from driftsafe import scp
from driftsafe.scenario import load_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"


def solve(name, t_safe_h):
    sc = load_scenario(SCENARIOS / name)
    chance = replace(sc.chance, t_safe=3600.0 * t_safe_h) if t_safe_h else sc.chance
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return sc, scp.solve_scp(sc.transfer_problem(), sc.scp_cfg, chance, sc.dispersion)


def line(label, r):
    t = r.trajectory
    mags = " ".join(f"{m:.3f}" for m in t.burn_magnitudes)
    print(f"{label:<10} dv {t.total_dv:7.4f} m/s  tf {t.tf / 60:7.2f} min  burns [{mags}]  "
          f"safe {r.safety.passed} (clr {r.safety.min_clearance:6.1f} m)  {r.seconds:5.1f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-safe-h", type=float, default=None, help="override the drift horizon [h]")
    args = ap.parse_args()

    _, ctrl = solve("leo_control.json", args.t_safe_h)
    _, fuel = solve("leo_min_fuel.json", args.t_safe_h)
    _, fast = solve("leo_min_time.json", args.t_safe_h)
    line("control", ctrl)
    line("min-fuel", fuel)
    line("min-time", fast)
    print(f"min-fuel saves {100 * (1 - fuel.trajectory.total_dv / ctrl.trajectory.total_dv):.1f}% against control\n")

    sc = load_scenario(SCENARIOS / "leo_burn_count.json")
    chance = replace(sc.chance, t_safe=3600.0 * args.t_safe_h) if args.t_safe_h else sc.chance
    grid = scp.grid_search_burn_count(sc.transfer_problem(), sc.scp_cfg, chance, sc.dispersion, sc.n_range)
    for N, row in grid.table.items():
        extra = f"dv {row['total_dv_mps']:.4f} m/s" if "total_dv_mps" in row else row.get("reason", "")
        print(f"N = {N}: {row['status']:<14} {extra}")
    print(f"best N = {grid.best.problem.n_nodes}")


if __name__ == "__main__":
    main()
