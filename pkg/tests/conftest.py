import warnings
from pathlib import Path

import numpy as np
import pytest

from driftsafe import dynamics as dyn
from driftsafe import scp, uq
from driftsafe.scenario import load_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

# criterion number -> list of (check name, passed, detail); filled by test_acceptance
CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        checks = CRITERIA[n]
        ok = all(p for _, p, _ in checks)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for name, p, detail in checks:
            tr.write_line(f"    [{'pass' if p else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def leo_ctx():
    return dyn.OrbitContext.from_semimajor_axis(6738e3, 398600.4418e9)


@pytest.fixture(scope="session")
def table_scenario():
    return load_scenario(SCENARIOS / "leo_double_coelliptic.json")


@pytest.fixture(scope="session")
def table_plan(table_scenario):
    return uq.two_impulse_plan(table_scenario.waypoints, table_scenario.ctx)


@pytest.fixture(scope="session")
def table_lincov(table_scenario, table_plan):
    return uq.closed_loop_dispersion(table_plan, table_scenario.dispersion, table_scenario.ctx)


def _solve(name, **over):
    sc = load_scenario(SCENARIOS / name)
    cfg = sc.scp_cfg
    if over:
        from dataclasses import replace

        cfg = replace(cfg, **over)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return scp.solve_scp(sc.transfer_problem(), cfg, sc.chance, sc.dispersion)


@pytest.fixture(scope="session")
def control_result():
    return _solve("leo_control.json")


@pytest.fixture(scope="session")
def min_fuel_result():
    return _solve("leo_min_fuel.json")


@pytest.fixture(scope="session")
def min_time_result():
    return _solve("leo_min_time.json")


@pytest.fixture(scope="session")
def zero_buffer_result():
    sc = load_scenario(SCENARIOS / "leo_min_fuel.json")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return scp.solve_scp(sc.transfer_problem(), sc.scp_cfg, sc.chance, None)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
