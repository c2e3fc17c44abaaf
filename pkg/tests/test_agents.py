import numpy as np
import pytest

from agents import (
    ActionKind,
    BaseStation,
    FallbackReason,
    GlobalView,
    MissionFailed,
    ReflectionRules,
    StrategyUpdate,
    SyncOutcome,
    UavAgent,
    UavHealth,
    ValidationVerdict,
    bs_aggregate,
    bs_plan,
    bs_reflect,
    handle_fallback,
    maybe_sync,
    uav_tick,
    validate,
)
from config import GA_EVAL_SECONDS
from link import Channel, LinkParams, LinkState, MessageKind
from memory import EntryKind, EpisodeSummary, RefreshDirective, RefreshKind, ShortTermMemory, summarize
from planner_fast import ConstraintSet, Path, PlannerParams
from planner_global import GaParams, Infeasible, check_partition
from store import LongTermStore, ingest
from tests.conftest import bfs_cost, known_map, make_uav, random_grid
from toolkit import ToolRegistry
from world import CellState, CostModel, GridMap

OBST, FREE = int(CellState.OBSTACLE), int(CellState.FREE)
SMALL_GA = GaParams(population=12, generations=10, seed=0)
RULES = ReflectionRules(fallback_trigger=3, weight_step=0.25, confidence_step=0.1,
                        latency_budget=0.5, weight_cap=2.0, confidence_floor=0.2)


def _run_until_done(agent: UavAgent, world: GridMap, limit: int = 50) -> int:
    for tick in range(limit):
        uav_tick(agent, world, None, float(tick), tick)
        if not agent.state.residual_waypoints:
            return tick
    raise AssertionError("waypoints not reached")


# ---------------------------------------------------------------------------
# validate / fallback
# ---------------------------------------------------------------------------


@pytest.fixture
def walled_uav(wall_grid):
    return make_uav((2, 0), local=known_map(wall_grid))


def test_validate_checks_bounds_first(walled_uav):
    verdict = validate((-1, 0), walled_uav, ConstraintSet(frozenset({(-1, 0)})), None)
    assert verdict.reason is FallbackReason.OUT_OF_BOUNDS


def test_validate_obstacle_before_no_fly(walled_uav):
    verdict = validate((3, 0), walled_uav, ConstraintSet(frozenset({(3, 0)})), None)
    assert verdict.reason is FallbackReason.KNOWN_OBSTACLE


def test_validate_no_fly(walled_uav):
    verdict = validate((1, 0), walled_uav, ConstraintSet(frozenset({(1, 0)})), None)
    assert verdict.reason is FallbackReason.NO_FLY_VIOLATION


def test_validate_energy_reserve():
    uav = make_uav((0, 0), energy=1.5)
    verdict = validate((1, 0), uav, ConstraintSet(energy_reserve_floor=1.0), None, CostModel())
    assert verdict.reason is FallbackReason.ENERGY_RESERVE
    assert validate((0, 0), uav, ConstraintSet(energy_reserve_floor=1.0), None).is_valid


def test_validate_low_confidence_then_valid():
    uav = make_uav((0, 0))
    detour = Path(((0, 0), (0, 1), (1, 1), (2, 1), (2, 0)))
    verdict = validate((0, 1), uav, ConstraintSet(), detour, threshold=0.6)
    assert verdict.reason is FallbackReason.LOW_CONFIDENCE
    assert verdict.confidence == 0.5
    assert validate((0, 1), uav, ConstraintSet(), detour, threshold=0.5).is_valid


def test_fallback_hovers_records_and_asks_for_help():
    agent = UavAgent(make_uav((1, 1), energy=10.0), collaborative=True)
    channel = Channel(LinkParams(), LinkState())
    verdict = ValidationVerdict.fallback(FallbackReason.NO_FLY_VIOLATION, (1, 2))
    action = handle_fallback(agent, verdict, channel, now=3.0, tick=3)

    assert action.cell == (1, 1)
    assert agent.fallback_count == 1 and agent.collab_sent == 1
    assert agent.stm.entries[-1].kind is EntryKind.FALLBACK
    assert channel.state.delivered[-1][0].kind is MessageKind.COLLAB_REQUEST
    assert agent.state.energy < 10.0 - agent.costs.e_hover


def test_local_fallback_sends_nothing():
    agent = UavAgent(make_uav((1, 1)))
    channel = Channel(LinkParams(), LinkState())
    handle_fallback(agent, ValidationVerdict.fallback(FallbackReason.NO_PATH), channel)
    assert channel.state.delivered == []


def test_reserve_fallback_lands_instead_of_hovering():
    agent = UavAgent(make_uav((1, 1), residual=[(3, 3)], energy=2.5),
                     constraints=ConstraintSet(energy_reserve_floor=2.0))
    verdict = ValidationVerdict.fallback(FallbackReason.ENERGY_RESERVE, (1, 2))
    action = handle_fallback(agent, verdict, None, now=1.0, tick=1)

    assert action.kind is ActionKind.LAND
    assert agent.landed and not agent.alive
    assert agent.state.energy == 2.5
    assert agent.actions == []
    assert "energy reserve" in agent.failure


def test_uav_lands_before_a_tick_could_cross_the_floor():
    floor = 5.0
    agent = UavAgent(make_uav((0, 0), residual=[(7, 7)], energy=12.0),
                     constraints=ConstraintSet(energy_reserve_floor=floor))
    world = GridMap.empty(8, 8)
    for tick in range(20):
        action, _ = uav_tick(agent, world, None, float(tick), tick)
        if action.kind is ActionKind.LAND:
            break

    assert agent.landed
    assert agent.state.energy >= floor
    assert all(a.energy_after >= floor for a in agent.actions)
    assert agent.state.residual_waypoints == [(7, 7)]


def test_collab_uplink_counts_toward_the_landing_budget():
    costs = CostModel(e_tx=0.1)
    agent = UavAgent(make_uav((1, 1), residual=[(3, 3)], energy=3.5), costs=costs,
                     constraints=ConstraintSet(energy_reserve_floor=1.0), collaborative=True)
    channel = Channel(LinkParams(), LinkState())
    onboard = costs.e_slm + costs.e_flight

    assert agent.state.energy - onboard >= 1.0
    action, rec = uav_tick(agent, GridMap.empty(8, 8), channel, 0.0, 0)
    assert action.kind is ActionKind.LAND and rec is None


def test_zero_floor_keeps_exhaustion_a_mission_failure():
    agent = UavAgent(make_uav((0, 0), residual=[(3, 3)], width=4, height=4, energy=0.1))
    with pytest.raises(MissionFailed):
        uav_tick(agent, GridMap.empty(4, 4), None, 0.0)
    assert not agent.landed


# ---------------------------------------------------------------------------
# fast loop
# ---------------------------------------------------------------------------


def test_uav_reaches_single_waypoint_on_shortest_path():
    world = GridMap.empty(4, 4)
    agent = UavAgent(make_uav((0, 0), residual=[(3, 3)], width=4, height=4),
                     tools=ToolRegistry.from_config())
    _run_until_done(agent, world)

    assert agent.state.trajectory_length == 6
    assert agent.state.completed == [(3, 3)]
    assert agent.fallback_count == 0
    assert all(r.latency > 0 for r in agent.records)
    assert agent.energy.total == pytest.approx(100.0 - agent.state.energy)


def test_uav_detours_around_newly_seen_wall(wall_grid):
    agent = UavAgent(make_uav((0, 0), residual=[(7, 0)]), sensor_radius=1)
    _run_until_done(agent, wall_grid, limit=100)
    assert agent.state.position == (7, 0)
    assert (3, 7) in agent.trajectory


def test_low_confidence_holds_then_escalates(wall_grid):
    uav = make_uav((2, 0), residual=[(4, 0)], local=known_map(wall_grid),
                   params=PlannerParams(1.0, 0.5, 9))
    agent = UavAgent(uav, fallback_trigger=3)
    for tick in range(4):
        uav_tick(agent, wall_grid, None, float(tick), tick)

    reasons = [r.fallback for r in agent.records]
    assert reasons == [FallbackReason.LOW_CONFIDENCE] * 3 + [None]
    assert agent.state.position == (2, 1)


def test_exhausted_uav_fails_mission():
    agent = UavAgent(make_uav((0, 0), residual=[(3, 3)], width=4, height=4, energy=0.1))
    with pytest.raises(MissionFailed):
        uav_tick(agent, GridMap.empty(4, 4), None, 0.0)
    assert not agent.alive
    action, rec = uav_tick(agent, GridMap.empty(4, 4), None, 1.0)
    assert rec is None and action.cell == (0, 0)


# ---------------------------------------------------------------------------
# sync
# ---------------------------------------------------------------------------


def _synced_agent(minimal_scenario) -> UavAgent:
    uav = make_uav((0, 0), residual=[(3, 3)], width=4, height=4,
                   params=PlannerParams(sync_interval=1))
    return UavAgent(uav, tools=minimal_scenario.tools, collaborative=True)


def test_sync_skipped_off_cadence(minimal_scenario):
    agent = _synced_agent(minimal_scenario)
    channel = Channel(minimal_scenario.link, LinkState())
    assert maybe_sync(agent, channel, 0.0) is SyncOutcome.SKIPPED


def test_sync_applies_strategy_within_timeout(minimal_scenario):
    agent = _synced_agent(minimal_scenario)
    base = BaseStation(minimal_scenario)
    channel = Channel(minimal_scenario.link, LinkState())
    uav_tick(agent, minimal_scenario.grid, channel, 0.0, 0)

    assert maybe_sync(agent, channel, 0.0, base) is SyncOutcome.SENT_AND_APPLIED
    assert agent.follow_order
    assert agent.stm.last_synced_round == 1
    assert agent.records[-1].sync is SyncOutcome.SENT_AND_APPLIED
    assert agent.records[-1].waiting > 0
    assert len(base.store) == 1 and base.plans == 1


def test_sync_over_dead_link_waits_timeout(minimal_scenario):
    agent = _synced_agent(minimal_scenario)
    channel = Channel(minimal_scenario.link, LinkState(up=False))
    uav_tick(agent, minimal_scenario.grid, channel, 0.0, 0)
    before = agent.records[-1].latency

    assert maybe_sync(agent, channel, 0.0, BaseStation(minimal_scenario)) is SyncOutcome.SENT
    assert agent.records[-1].latency == pytest.approx(before + agent.sync_timeout)
    assert agent.stm.last_synced_round == 0
    assert len(channel.state.uplink_queue) == 1


def test_strategy_update_encoding():
    update = StrategyUpdate(3, 7, ((1, 2), (4, 4)), PlannerParams(1.25, 0.3, 5),
                            ConstraintSet(frozenset({(0, 1)}), 2.0),
                            RefreshDirective.truncate_to(4), issued_at=1.5)
    assert StrategyUpdate.from_bytes(update.to_bytes()) == update
    assert update.payload_bytes == len(update.to_bytes())


# ---------------------------------------------------------------------------
# base station
# ---------------------------------------------------------------------------


def _summary(uav, rnd, t, position, residual=(), deltas=(), fallbacks=0, latency=0.0):
    return EpisodeSummary(uav_id=uav, sync_round=rnd, timestamp=t, position=position,
                          obstacle_deltas=tuple(deltas), residual=tuple(residual),
                          residual_count=len(residual), fallback_count=fallbacks,
                          latency_mean=latency)


def test_aggregate_keeps_latest_state_and_newest_report():
    view = bs_aggregate([
        _summary(0, 2, 2.0, (1, 1), deltas=[((2, 2), FREE)]),
        _summary(0, 1, 1.0, (0, 0), deltas=[((2, 2), OBST)]),
        _summary(1, 1, 1.5, (5, 5), residual=[(6, 6)]),
    ], 8, 8)
    assert view.uav_ids == [0, 1]
    assert view.positions[0] == (1, 1)
    assert view.rounds == {0: 2, 1: 1}
    assert view.residual[1] == ((6, 6),)
    assert view.known.known_obstacles() == set()


def test_reflect_adjusts_weight_and_threshold():
    p = PlannerParams(1.5, 0.5, 9)
    view = GlobalView(
        positions={0: (0, 0), 1: (1, 1)},
        health={0: UavHealth(fallback_count=5), 1: UavHealth(latency_mean=0.9)},
        params={0: p, 1: p},
    )
    out = bs_reflect(view, None, RULES)
    assert out.fired == {0}
    assert out.params[0] == PlannerParams(1.25, 0.4, 9)
    assert out.params[1] == PlannerParams(1.75, 0.5, 9)


def test_reflect_uses_recent_history():
    lts = LongTermStore(4, 4)
    for rnd, fb in ((1, 0), (2, 2), (3, 2)):
        ingest(lts, _summary(0, rnd, float(rnd), (0, 0), fallbacks=fb))
    view = GlobalView(positions={0: (0, 0)}, health={0: UavHealth()}, params={0: PlannerParams(1.0, 0.1, 9)})
    out = bs_reflect(view, lts, RULES)
    assert out.fired == {0}
    assert out.params[0].heuristic_weight == 1.0
    assert out.params[0].replan_confidence_threshold == pytest.approx(0.1)


def test_plan_swaps_badly_assigned_waypoints():
    view = bs_aggregate([
        _summary(0, 4, 4.0, (0, 0), residual=[(7, 6)]),
        _summary(1, 2, 4.0, (7, 7), residual=[(0, 1)]),
    ], 8, 8)
    outcome = bs_plan(view, SMALL_GA, tools=ToolRegistry.from_config())
    assert outcome.assignment.objective == 2
    check_partition(outcome.assignment, [(7, 6), (0, 1)])
    assert outcome.updates[0].assignment_slice == ((0, 1),)
    assert outcome.updates[0].ack_round == 4 and outcome.updates[1].ack_round == 2
    assert outcome.updates[0].refresh.kind is RefreshKind.TRUNCATE
    assert [r.tool for r in outcome.receipts] == ["ga_planner"]
    assert outcome.latency == pytest.approx(CostModel().t_llm + outcome.evaluations * GA_EVAL_SECONDS + 0.5)


def test_plan_keeps_good_slices_and_clears_fired():
    view = bs_aggregate([_summary(0, 1, 1.0, (0, 0), residual=[(0, 1)])], 8, 8)
    reflection = bs_reflect(view, None, RULES)
    assert bs_plan(view, SMALL_GA, reflection=reflection).updates[0].refresh.kind is RefreshKind.NONE
    reflection.fired.add(0)
    assert bs_plan(view, SMALL_GA, reflection=reflection).updates[0].refresh.kind is RefreshKind.CLEAR


def test_plan_on_empty_view():
    with pytest.raises(Infeasible):
        bs_plan(GlobalView(), SMALL_GA)


def test_next_step_breaks_ties_by_row(minimal_scenario):
    base = BaseStation(minimal_scenario)
    assert base.next_step((0, 0), (2, 2)) == (1, 0)
    assert base.next_step((2, 2), (2, 2)) == (2, 2)
    assert base.next_step((0, 0), None) == (0, 0)


def test_base_station_resolves_residual_masks(minimal_scenario):
    base = BaseStation(minimal_scenario)
    uav = make_uav((0, 0), residual=[(3, 3)], width=4, height=4)
    sent = summarize(ShortTermMemory(8), set(), uav, 0.0, route=[(3, 3)], route_round=0)
    wire = EpisodeSummary.from_bytes(sent.to_bytes())
    assert base.resolve(wire).residual == ((3, 3),)

    stray = EpisodeSummary.from_bytes(
        summarize(ShortTermMemory(8), set(), uav, 0.0, route=[(3, 3)], route_round=9).to_bytes())
    assert base.resolve(stray) is None


def test_applied_strategy_becomes_the_mask_route(minimal_scenario):
    agent = _synced_agent(minimal_scenario)
    base = BaseStation(minimal_scenario)
    channel = Channel(minimal_scenario.link, LinkState())
    uav_tick(agent, minimal_scenario.grid, channel, 0.0, 0)
    assert maybe_sync(agent, channel, 0.0, base) is SyncOutcome.SENT_AND_APPLIED
    assert agent.route_round == 1
    assert base.assigned[(0, 1)] == agent.route == tuple(agent.state.residual_waypoints)


def _reports(seed: int, uavs: int = 4, rounds: int = 3):
    """Random reports on a 6x6 grid; timestamps shuffled so arrival order is not time order."""
    rng = np.random.default_rng(seed)
    stamps = rng.permutation(uavs * rounds).astype(float)
    out = []
    for i, (rnd, uav) in enumerate((r, u) for r in range(1, rounds + 1) for u in range(uavs)):
        cells = {(int(x), int(y)) for x, y in rng.integers(0, 6, size=(4, 2))}
        deltas = tuple((c, OBST if rng.random() < 0.5 else FREE) for c in sorted(cells))
        out.append(EpisodeSummary(uav_id=uav, sync_round=rnd, timestamp=stamps[i],
                                  position=(uav, rnd), obstacle_deltas=deltas))
    return out


def test_aggregate_matches_timestamp_ordered_replay():
    for seed in range(5):
        reports = _reports(seed)
        view = bs_aggregate(reports, 6, 6)

        latest = {}
        for s in sorted(reports, key=lambda s: s.timestamp):
            for cell, state in s.obstacle_deltas:
                latest[cell] = state
        expected = {c for c, state in latest.items() if state == OBST}
        assert view.known.known_obstacles() == expected
        assert view.rounds == {u: 3 for u in range(4)}
        assert view.positions == {u: (u, 3) for u in range(4)}


def test_aggregate_reports_only_what_was_sent():
    reports = _reports(11)
    view = bs_aggregate(reports, 6, 6)
    sent = {(c, state, s.timestamp) for s in reports for c, state in s.obstacle_deltas}
    for y in range(6):
        for x in range(6):
            state = int(view.known.states[y, x])
            if state == int(CellState.UNKNOWN):
                assert all(c != (x, y) for c, _, _ in sent)
            else:
                assert ((x, y), state, float(view.known.observed_at[y, x])) in sent

    shuffled = bs_aggregate(list(reversed(reports)), 6, 6)
    assert (shuffled.known.states == view.known.states).all()


def test_repeated_low_confidence_sends_one_request_each():
    wall = GridMap.from_obstacles(8, 8, [(3, y) for y in range(7)])
    uav = make_uav((2, 0), residual=[(4, 0)], local=known_map(wall),
                   params=PlannerParams(1.0, 0.5, 9))
    agent = UavAgent(uav, fallback_trigger=3, collaborative=True)
    channel = Channel(LinkParams(), LinkState())
    actions = [uav_tick(agent, wall, channel, float(t), t)[0] for t in range(3)]

    requests = [m for m, _ in channel.state.delivered if m.kind is MessageKind.COLLAB_REQUEST]
    assert len(requests) == 3 and agent.collab_sent == 3
    assert {m.body.reason for m in requests} == {int(FallbackReason.LOW_CONFIDENCE)}
    assert [a.kind for a in actions] == [ActionKind.HOVER] * 3
    assert agent.state.position == (2, 0)


def test_tick_by_tick_against_bfs_replay():
    costs = CostModel()
    for seed in range(10):
        grid = random_grid(seed, 8, 8, density=0.2, keep=[(0, 0), (7, 7)])
        if bfs_cost(grid, (0, 0), (7, 7)) is None:
            continue
        uav = make_uav((0, 0), residual=[(7, 7)], local=known_map(grid), params=PlannerParams(1.0, 0.0, 9))
        agent = UavAgent(uav, costs=costs)
        position, energy = (0, 0), 100.0
        for tick in range(64):
            if position == (7, 7):
                break
            before = bfs_cost(grid, position, (7, 7))
            action, rec = uav_tick(agent, grid, None, float(tick), tick)
            assert action.kind is ActionKind.MOVE and rec.fallback is None
            assert bfs_cost(grid, action.cell, (7, 7)) == before - 1
            position = action.cell
            energy -= costs.e_slm + costs.e_flight
            assert agent.state.position == position
            assert agent.state.energy == pytest.approx(energy)
            assert agent.state.decision_count == tick + 1
        assert agent.trajectory[-1] == (7, 7)
        assert len(agent.trajectory) - 1 == bfs_cost(grid, (0, 0), (7, 7))
