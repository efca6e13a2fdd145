import copy
import json
import logging

import numpy as np
import pytest

from driftsafe.scenario import ScenarioError, dump_scenario, load_scenario, scenario_from_dict

from .conftest import SCENARIOS

ALL = sorted(SCENARIOS.glob("*.json"))


def _table():
    return json.loads((SCENARIOS / "leo_double_coelliptic.json").read_text())


@pytest.mark.parametrize("path", ALL, ids=[p.stem for p in ALL])
def test_round_trip_is_idempotent(path):
    sc = load_scenario(path)
    once = dump_scenario(sc)
    again = dump_scenario(scenario_from_dict(json.loads(once)))
    assert once == again


def test_units_are_converted_to_si():
    sc = scenario_from_dict(_table())
    assert sc.ctx.a == 6738e3
    assert sc.chance.t_safe == 3600.0
    assert sc.waypoints[1].transfer_time == pytest.approx(35.5 * 60)
    assert sc.dispersion.nav.tau == pytest.approx(3.6 * 3600)
    assert sc.dispersion.gates.sigma_r == pytest.approx(3e-4)
    assert sc.dispersion.P_x0[3, 3] == pytest.approx(0.05**2)
    np.testing.assert_allclose(sc.x_i, sc.waypoints[0].state)


def test_mean_motion_for_leo():
    sc = scenario_from_dict(_table())
    assert sc.ctx.n == pytest.approx(np.sqrt(398600.4418e9 / 6738e3**3), rel=1e-14)


def _error(mutate) -> str:
    d = _table()
    mutate(d)
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(d)
    return str(err.value)


def test_schema_errors_name_the_field():
    assert "chance.r_kos" in _error(lambda d: d["chance"].update(r_kos=150))
    assert "chance.r_kos" in _error(lambda d: d["chance"].pop("r_kos_m"))
    assert "orbit.semimajor_axis" in _error(lambda d: d["orbit"].update(semimajor_axis_m=1.0))
    assert "chance.colour" in _error(lambda d: d["chance"].update(colour="red"))
    assert "seed" in _error(lambda d: d.update(seed=-1))
    assert "uq.mode" in _error(lambda d: d.update(uq={"mode": "bootstrap"}))
    assert "t_safe" in _error(lambda d: d["chance"].update(t_safe_h="one"))
    assert "waypoints" in _error(lambda d: d["waypoints"][1].pop("position_m"))


def test_missing_beta_uses_default_with_notice(caplog):
    d = _table()
    d["chance"].pop("beta")
    with caplog.at_level(logging.WARNING):
        sc = scenario_from_dict(d)
    assert sc.chance.beta == 0.99
    assert any("beta" in r.message for r in caplog.records)


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "nope.json")
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_prescribed_nodes_map_to_waypoints():
    sc = load_scenario(SCENARIOS / "leo_control.json")
    assert sc.scp_cfg.waypoints == {1: (-1400.0, -7500.0), 2: (-1400.0, -750.0)}
    assert sc.scp_cfg.tf_fixed and sc.scp_cfg.tf_max == 7200.0


def test_resolved_dict_is_plain_json():
    d = load_scenario(SCENARIOS / "leo_burn_count.json").to_dict()
    assert json.loads(json.dumps(d)) == copy.deepcopy(d)
    assert d["scp"]["N_range"] == [3, 4, 5, 6]
