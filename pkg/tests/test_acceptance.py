"""
End-to-end checks against independent oracles and the mode-level orderings.

The 20-seed reference comparison is marked `slow`; run it with `pytest -m slow`.
"""

import numpy as np
import pytest

from config import COMPRESSION_THRESHOLD, TICK_SECONDS
from experiment import Mode, RunStatus, audit_run, compare, render, run
from helpers import manhattan
from planner_fast import DStarPlanner, NoPath, astar, dstar_replan
from planner_global import GaParams, brute_force_assign, ga_assign
from scenario import load_scenario_file
from tests.conftest import ROOT, bfs_cost, known_map, make_scenario, random_grid
from toolkit import Tier, ToolDescriptor, ToolQuery, ToolRegistry, exhaustive_scan, select_topk
from world import CellState, ObservationDelta

SEEDS = list(range(20))


@pytest.fixture(scope="module")
def reference():
    return load_scenario_file(ROOT / "scenarios" / "reference.json")


def _mid_scenario(**sections):
    base = dict(
        map={"width": 24, "height": 24, "obstacle_density": 0.12},
        uavs=[{"start": [1, 1]}, {"start": [22, 22]}],
        waypoints={"count": 8},
    )
    base.update(sections)
    return make_scenario(**base)


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------


def test_astar_equals_bfs_on_200_maps():
    rng = np.random.default_rng(0)
    checked = 0
    for seed in range(200):
        w, h = (int(v) for v in rng.integers(4, 17, size=2))
        goal = (w - 1, h - 1)
        grid = random_grid(seed, w, h, density=0.25, keep=[(0, 0), goal])
        optimal = bfs_cost(grid, (0, 0), goal)
        if optimal is None:
            with pytest.raises(NoPath):
                astar(grid, (0, 0), goal)
            continue
        assert astar(grid, (0, 0), goal).cost == optimal
        for weight in (1.5, 2.0):
            assert astar(grid, (0, 0), goal, heuristic_weight=weight).cost <= weight * optimal
        checked += 1
    assert checked > 100


def _walkable(cache, path) -> bool:
    return all(manhattan(a, b) == 1 and not cache.is_known_obstacle(b)
               for a, b in zip(path.cells, path.cells[1:]))


def test_dstar_repair_equals_fresh_astar_on_100_cases():
    # per case: four repairs in a row, the UAV advancing each time; the third frees the first blocker
    cases = 0
    seed = 0
    while cases < 100:
        grid = random_grid(seed, 10, 10, density=0.15, keep=[(0, 0), (9, 9)])
        seed += 1
        if bfs_cost(grid, (0, 0), (9, 9)) is None:
            continue
        cache = known_map(grid)
        planner = DStarPlanner.for_map(cache, (9, 9))
        path = dstar_replan(planner, cache, (0, 0))
        if path.cost < 6:
            continue
        cases += 1
        blockers = []
        for step in range(4):
            position = path.cells[1]
            if step == 2:
                delta = ObservationDelta(((blockers[0], int(CellState.FREE)),), float(step + 1))
            else:
                blocker = path.cells[max(2, len(path.cells) // 2)]
                if blocker == (9, 9):
                    break
                blockers.append(blocker)
                delta = ObservationDelta(((blocker, int(CellState.OBSTACLE)),), float(step + 1))
            cache.apply(delta)
            try:
                fresh = astar(cache, position, (9, 9))
            except NoPath:
                with pytest.raises(NoPath):
                    dstar_replan(planner, cache, position, delta)
                break
            path = dstar_replan(planner, cache, position, delta)
            assert path.cells[0] == position and path.goal == (9, 9)
            assert _walkable(cache, path)
            assert path.cost == fresh.cost
            if path.cost < 2:
                break


def test_ga_close_to_exhaustive_optimum():
    equal = instances = 0
    seed = 0
    while instances < 50:
        grid = random_grid(1000 + seed, 16, 16, density=0.15, keep=[(0, 0), (15, 15)])
        seed += 1
        comp = sorted(grid.component((0, 0)), key=lambda c: (c[1], c[0]))
        if len(comp) < 20:
            continue
        instances += 1
        starts = [comp[0], comp[-1]]
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(comp) - 2, size=6, replace=False) + 1
        wps = [comp[int(i)] for i in picks]

        best = brute_force_assign(grid, starts, wps).objective
        got = ga_assign(grid, starts, wps, GaParams(population=64, generations=200, seed=seed)).objective
        assert best <= got <= 1.05 * best
        equal += got == best
    assert equal >= 45


def test_topk_equals_scan_on_seeded_registries():
    tags = ["sense", "plan", "local", "global", "weighted", "incremental", "aggregate", "map"]
    for seed in range(50):
        rng = np.random.default_rng(seed)
        tools = [
            ToolDescriptor(
                name=f"t{i}",
                tier=Tier.ONBOARD if rng.random() < 0.6 else Tier.GROUND,
                tags=frozenset(rng.choice(tags, size=int(rng.integers(1, 4)), replace=False).tolist()),
                latency_cost=float(rng.choice([0.001, 0.01, 0.1])),
                energy_cost=float(rng.choice([0.0, 0.5])),
                resource_floor=float(rng.choice([0.0, 1.0, 3.0])),
            )
            for i in range(int(rng.integers(5, 30)))
        ]
        registry = ToolRegistry(tools)
        for _ in range(20):
            query = ToolQuery(
                required_tags=frozenset(rng.choice(tags, size=int(rng.integers(0, 3)), replace=False).tolist()),
                tier=[None, Tier.ONBOARD, Tier.GROUND][int(rng.integers(3))],
                available_energy=float(rng.choice([0.5, 2.0, 10.0])),
                k=int(rng.integers(1, 6)),
            )
            assert select_topk(registry, query) == exhaustive_scan(registry, query)


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def test_full_outage_local_modes_fly_identically():
    sc = _mid_scenario(link={"outage_from": 1})
    for seed in (0, 1):
        local = run(sc, Mode.L_SLM, seed)
        synced = run(sc, Mode.SLM_LLM, seed)
        assert synced.trajectories == local.trajectories
        assert synced.uplink_bytes == 0
        assert audit_run(synced, sc) == []


def test_central_mode_stalls_once_link_is_lost():
    outage_tick = 6
    sc = _mid_scenario(link={"p_down": 0.0, "outage_from": outage_tick + 1}, sim={"tick_limit": 200})
    report = run(sc, Mode.G_LLM, 0)
    assert report.status is RunStatus.TICK_LIMIT
    assert all(u.mission_time <= outage_tick * TICK_SECONDS for u in report.uavs)
    assert report.waypoints_done < report.waypoints_total


def test_repeated_runs_render_identically():
    sc = _mid_scenario(link={"p_down": 0.1, "p_up": 0.3})
    for mode in Mode:
        for seed in (4, 5):
            assert render(run(sc, mode, seed), "text") == render(run(sc, mode, seed), "text")


@pytest.mark.slow
def test_reference_orderings_over_20_seeds(reference):
    table = compare(reference, [m.value for m in Mode], SEEDS)
    assert not table.errors
    s = table.summary.set_index("mode")
    lat = s["mean_latency_mean"]
    length = s["traj_len_mean"]
    assert lat["l-slm"] < lat["slm-llm"] < lat["g-llm"]
    assert lat["slm-llm"] - lat["l-slm"] > 0.1 * lat["l-slm"]
    assert lat["g-llm"] - lat["slm-llm"] > 0.1 * lat["slm-llm"]
    assert length["g-llm"] <= length["slm-llm"] <= length["l-slm"]
    assert length["g-llm"] <= 0.95 * length["l-slm"]
    assert table.verdicts == {"latency": True, "length": True}


@pytest.mark.slow
def test_reference_cadence_compression_and_safety(reference):
    for seed in SEEDS:
        report = run(reference, Mode.SLM_LLM, seed)
        for u in report.uavs:
            assert report.sync_attempts[u.uav_id] == list(range(9, u.decisions + 1, 9))
        assert report.summary_bytes <= COMPRESSION_THRESHOLD * report.raw_window_bytes
        assert audit_run(report, reference) == []
