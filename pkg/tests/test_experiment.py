import dataclasses
import io

import pandas as pd
import pytest

from config import CSV_COLUMNS
from experiment import (
    ComparisonTable,
    Mode,
    RunStatus,
    Simulation,
    audit_run,
    compare,
    emit,
    ordering_verdicts,
    read_table,
    render,
    run,
    summarize_runs,
)
from memory import raw_window_bytes
from tests.conftest import make_scenario

ALL_MODES = [m.value for m in Mode]


def test_mode_parse():
    assert Mode.parse("SLM_LLM") is Mode.SLM_LLM
    assert Mode.parse(Mode.G_LLM) is Mode.G_LLM
    with pytest.raises(ValueError):
        Mode.parse("hybrid")


@pytest.mark.parametrize("mode", ALL_MODES)
def test_minimal_mission_every_mode(minimal_scenario, mode):
    report = run(minimal_scenario, mode, 0)
    assert report.status is RunStatus.COMPLETED
    assert report.traj_len == 6
    assert report.waypoints_done == 1 == report.waypoints_total
    assert audit_run(report, minimal_scenario) == []


def test_local_mode_never_transmits(minimal_scenario):
    report = run(minimal_scenario, Mode.L_SLM, 0)
    assert report.uplink_bytes == report.downlink_bytes == 0
    assert report.bs_energy == 0.0
    assert all(r.transfer == 0 and r.waiting == 0 for r in report.records[0])


def test_central_mode_round_trips_every_decision(minimal_scenario):
    report = run(minimal_scenario, Mode.G_LLM, 0)
    u = report.uavs[0]
    assert u.uplink_bytes > 0 and u.downlink_bytes > 0
    assert u.energy_parts["inference"] == 0.0
    assert report.bs_energy >= 8.0 * (u.decisions + 1)
    assert report.mean_latency > 0.8


def test_runs_are_deterministic():
    sc = make_scenario(
        map={"width": 16, "height": 16, "obstacle_density": 0.15},
        uavs=[{"start": [0, 0]}, {"start": [15, 15]}],
        waypoints={"count": 6},
        link={"p_down": 0.2, "p_up": 0.4},
        agents={"sync_interval": 3},
    )
    for mode in ALL_MODES:
        a, b = run(sc, mode, 7), run(sc, mode, 7)
        assert a.rows() == b.rows()
        assert a.link_trace == b.link_trace
        assert a.trajectories == b.trajectories


def test_semantic_sync_follows_cadence():
    sc = make_scenario(
        map={"width": 12, "height": 12, "obstacle_density": 0.1},
        uavs=[{"start": [0, 0]}, {"start": [11, 11]}],
        waypoints={"count": 8},
        link={"p_down": 0.0},
        agents={"sync_interval": 4},
    )
    report = run(sc, Mode.SLM_LLM, 3)
    assert report.status is RunStatus.COMPLETED
    for u in report.uavs:
        assert report.sync_attempts[u.uav_id] == list(range(4, u.decisions + 1, 4))
    assert report.summary_bytes > 0
    assert audit_run(report, sc) == []


def test_tick_limit_reported():
    sc = make_scenario(sim={"tick_limit": 3})
    report = run(sc, Mode.L_SLM, 0)
    assert report.status is RunStatus.TICK_LIMIT
    assert report.ticks == 3
    assert "tick limit" in report.errors[0]


def test_energy_failure_is_reported_not_raised():
    sc = make_scenario(uavs=[{"start": [0, 0], "energy": 2.0}])
    report = run(sc, Mode.L_SLM, 0)
    assert report.status is RunStatus.FAILED
    assert 0 in report.failures
    assert report.uavs[0].alive is False


def test_simulation_brief_partitions_waypoints():
    sc = make_scenario(
        uavs=[{"start": [0, 0]}, {"start": [7, 7]}],
        waypoints=[[1, 0], [6, 7], [2, 0]],
    )
    sim = Simulation(sc, Mode.L_SLM, 0)
    assert sim.agents[0].state.residual_waypoints == [(1, 0), (2, 0)]
    assert sim.agents[1].state.residual_waypoints == [(6, 7)]


def test_report_rows_include_aggregate(minimal_scenario):
    rows = run(minimal_scenario, Mode.SLM_LLM, 0).rows()
    assert [r["uav_id"] for r in rows] == ["0", "all"]
    assert list(rows[0]) == list(CSV_COLUMNS)


def _synced_scenario():
    return make_scenario(link={"p_down": 0.0}, agents={"sync_interval": 3})


def test_compare_summarizes_and_judges():
    sc = _synced_scenario()
    table = compare(sc, ALL_MODES, [0, 1])
    assert len(table.runs) == 3 * 2 * 2
    assert set(table.summary["mode"]) == set(ALL_MODES)
    assert (table.summary["n"] == 2).all()
    assert table.verdicts["latency"] is True
    assert not table.low_confidence
    with pytest.raises(ValueError):
        compare(sc, ALL_MODES, [])


def test_verdicts_need_every_mode():
    runs = pd.DataFrame([
        {"mode": "l-slm", "seed": 0, "uav_id": "all", "traj_len": 10, "mean_latency": 0.1,
         "max_latency": 0.1, "energy": 1.0, "uplink_bytes": 0, "downlink_bytes": 0,
         "fallbacks": 0, "waypoints_done": 1, "mission_time": 10.0},
    ])
    assert ordering_verdicts(summarize_runs(runs)) == {"latency": None, "length": None}


def test_csv_reads_back(minimal_scenario, tmp_path):
    report = run(minimal_scenario, Mode.G_LLM, 0)
    path = tmp_path / "out" / "run.csv"
    text = emit(report, "csv", path)
    assert path.read_text() == text
    back = read_table(path)
    assert list(back.columns) == list(CSV_COLUMNS)
    assert back["uav_id"].tolist() == ["0", "all"]
    assert back.loc[0, "mean_latency"] == report.frame().loc[0, "mean_latency"]


def test_empty_table_renders_header_only():
    text = render(pd.DataFrame(columns=list(CSV_COLUMNS)))
    assert text == ",".join(CSV_COLUMNS) + "\n"


def test_text_format_flags_single_seed():
    table = compare(_synced_scenario(), ALL_MODES, [0])
    assert isinstance(table, ComparisonTable) and table.low_confidence
    text = render(table, "text")
    assert "verdict.latency=PASS (low-confidence n=1)" in text
    with pytest.raises(ValueError):
        render(table, "xml")


def test_read_table_from_buffer():
    buf = io.StringIO(",".join(CSV_COLUMNS) + "\nl-slm,0,all,6,0.1,0.2,3.5,0,0,0,1,7.0\n")
    frame = read_table(buf)
    assert frame.loc[0, "uav_id"] == "all"
    assert frame.loc[0, "energy"] == 3.5


def test_parallel_compare_matches_sequential():
    sc = _synced_scenario()
    sequential = compare(sc, ALL_MODES, [0, 1])
    parallel = compare(sc, ALL_MODES, [0, 1], workers=2)
    pd.testing.assert_frame_equal(parallel.runs, sequential.runs)
    assert parallel.verdicts == sequential.verdicts


def test_lost_acks_count_each_raw_entry_once():
    sc = make_scenario(link={"outage_from": 1}, agents={"sync_interval": 2},
                       memory={"capacity": 512})
    sim = Simulation(sc, Mode.SLM_LLM, 0)
    report = sim.run()
    agent = sim.agents[0]
    assert len(agent.sync_attempts) >= 3
    assert agent.stm.last_synced_round == 0
    assert 0 < report.raw_window_bytes <= raw_window_bytes(agent.stm.entries)


@pytest.mark.parametrize("mode", ALL_MODES)
def test_reserve_floor_lands_and_audits_clean(mode):
    sc = make_scenario(uavs=[{"start": [0, 0], "energy": 8.0}],
                       constraints={"energy_reserve_floor": 3.0})
    sim = Simulation(sc, mode, 0)
    report = sim.run()

    assert report.status is RunStatus.FAILED
    assert sim.agents[0].landed
    assert "energy reserve" in report.failures[0]
    assert all(a.energy_after >= 3.0 for a in report.actions[0])
    assert audit_run(report, sc) == []


def test_audit_flags_a_hover_under_the_floor():
    sc = make_scenario(uavs=[{"start": [0, 0], "energy": 8.0}],
                       constraints={"energy_reserve_floor": 3.0})
    report = run(sc, Mode.L_SLM, 0)
    last = report.actions[0][-1]
    report.actions[0].append(dataclasses.replace(last, tick=last.tick + 1, frm=last.to, energy_after=2.9))

    assert any("below reserve floor" in p for p in audit_run(report, sc))
