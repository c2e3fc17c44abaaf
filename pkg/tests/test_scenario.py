import json

import pytest

from helpers import UnknownOverride
from scenario import ParseError, ValidationError, load_scenario, load_scenario_file
from tests.conftest import make_scenario, scenario_doc


def test_minimal_scenario_loads(scenario_dir):
    sc = load_scenario_file(scenario_dir / "minimal.json")
    assert (sc.width, sc.height) == (4, 4)
    assert sc.starts == [(0, 0)] and sc.waypoints == [(3, 3)]
    assert not sc.procedural
    assert len(sc.tools) == 5


def test_reference_scenario_is_procedural_and_seeded(scenario_dir):
    sc = load_scenario_file(scenario_dir / "reference.json")
    assert (sc.width, sc.height) == (64, 64)
    assert sc.procedural and len(sc.waypoints) == 24
    assert sc.planner_params.sync_interval == 9
    again = load_scenario_file(scenario_dir / "reference.json")
    assert again.grid.fingerprint == sc.grid.fingerprint
    assert again.waypoints == sc.waypoints
    other = sc.for_seed(1)
    assert other.seed == 1
    assert other.grid.fingerprint != sc.grid.fingerprint
    assert sc.for_seed(0) is sc


def test_malformed_json_reports_line_and_column():
    with pytest.raises(ParseError) as info:
        load_scenario('{\n  "map": {"width": 4,\n}')
    assert info.value.line == 3
    assert info.value.diagnostic().startswith("parse error: line 3")


def test_missing_section_is_a_parse_error():
    doc = scenario_doc()
    del doc["map"]
    with pytest.raises(ParseError) as info:
        load_scenario(json.dumps(doc))
    assert info.value.field == "map"


def test_unknown_key_is_a_parse_error():
    with pytest.raises(ParseError):
        make_scenario(telemetry={"on": True})


@pytest.mark.parametrize("sections, field", [
    ({"link": {"p_down": 1.5}}, "link.p_down"),
    ({"waypoints": [[9, 9]]}, "waypoints[0]"),
    ({"waypoints": [[1, 1], [1, 1]]}, "waypoints[1]"),
    ({"uavs": [{"start": [2, 2]}], "map": {"width": 8, "height": 8, "obstacles": [[2, 2]]}},
     "uavs[0].start"),
    ({"costs": {"t_slm": 1.0, "t_llm": 0.5}}, "costs.t_slm"),
    ({"constraints": {"no_fly": [[7, 7]]}}, "waypoints[0]"),
    ({"ga": {"population": 4, "elitism": 4}}, "ga.elitism"),
])
def test_validation_names_the_field(sections, field):
    with pytest.raises(ValidationError) as info:
        make_scenario(**sections)
    assert info.value.field == field
    assert info.value.diagnostic().startswith(f"invalid: {field}")


def test_unreachable_waypoint_rejected():
    walled = {"width": 8, "height": 8, "obstacles": [[6, 7], [7, 6]]}
    with pytest.raises(ValidationError) as info:
        make_scenario(map=walled)
    assert "unreachable" in info.value.message


def test_overrides_apply_dotted_keys():
    sc = load_scenario(json.dumps(scenario_doc()), {"agents.sync_interval": 3, "link.p_down": 0.0})
    assert sc.planner_params.sync_interval == 3
    assert sc.link.p_down == 0.0


def test_unknown_override_rejected():
    with pytest.raises(UnknownOverride):
        load_scenario(json.dumps(scenario_doc()), {"agents.warp_drive": 1})
    with pytest.raises(UnknownOverride):
        load_scenario(json.dumps(scenario_doc()), {"agents": 1})


def test_for_seed_keeps_explicit_layout(minimal_scenario):
    other = minimal_scenario.for_seed(5)
    assert other.waypoints == minimal_scenario.waypoints
    assert other.grid.fingerprint == minimal_scenario.grid.fingerprint
    assert other.ga.seed != minimal_scenario.ga.seed
