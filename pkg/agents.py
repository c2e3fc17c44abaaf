"""
Agents — the UAV fast loop and the base-station slow loop

UAV, every decision tick:   observe -> select target -> plan -> validate -> act
UAV, every K-th decision:   summarize -> uplink -> (StrategyUpdate within τ ? apply : continue)
Base station, per round:    ingest -> aggregate -> reflect -> plan -> downlink
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from codec import DELTA_BYTES, Reader, Writer
from config import (
    BS_ID,
    CONFIDENCE_FLOOR,
    CONFIDENCE_STEP,
    FALLBACK_TRIGGER,
    GA_EVAL_SECONDS,
    HEURISTIC_WEIGHT_CAP,
    LATENCY_BUDGET,
    STM_CAPACITY,
    STM_REFRESH_KEEP,
    SYNC_TIMEOUT,
    WEIGHT_STEP,
    logger,
)
from helpers import Cell, cell_order, derive_seed, manhattan, neighbors4
from link import Channel, DeliveryOutcome, Message, MessageKind
from memory import (
    EntryKind,
    EpisodeSummary,
    MemoryEntry,
    RefreshDirective,
    ShortTermMemory,
    apply_refresh,
    record,
    summarize,
)
from planner_fast import (
    ConstraintSet,
    DStarPlanner,
    NoPath,
    NoReachableWaypoint,
    Path,
    PlannerParams,
    astar,
    confidence,
    dstar_replan,
    next_waypoint_greedy,
)
from planner_global import (
    Assignment,
    GaParams,
    Infeasible,
    distance_field,
    ga_evolve,
)
from store import DuplicateEpisode, LongTermStore, ingest, merge_deltas
from toolkit import (
    InsufficientEnergy,
    InvocationReceipt,
    Tier,
    ToolLedger,
    ToolQuery,
    ToolRegistry,
    invoke,
    select_topk,
)
from world import (
    CostModel,
    EnergyExhausted,
    GridMap,
    LocalMapCache,
    ObservationDelta,
    UavState,
    apply_move,
    move_cost,
    nearest_start_partition,
    observe,
)

__all__ = [
    "ConstraintSet",
    "PlannerParams",
    "StrategyUpdate",
    "ValidationVerdict",
    "UavAgent",
    "BaseStation",
    "uav_tick",
    "validate",
    "handle_fallback",
    "maybe_sync",
    "bs_aggregate",
    "bs_plan",
    "bs_reflect",
]


class MissionFailed(Exception):
    def __init__(self, uav_id: int, cause: Exception) -> None:
        super().__init__(f"UAV {uav_id} out of mission: {cause}")
        self.uav_id = uav_id
        self.cause = cause


# ---------------------------------------------------------------------------
# Message bodies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyUpdate:
    uav_id: int
    ack_round: int
    assignment_slice: Tuple[Cell, ...]
    params: PlannerParams
    constraints: ConstraintSet
    refresh: RefreshDirective = RefreshDirective()
    issued_at: float = 0.0

    def to_bytes(self) -> bytes:
        w = (
            Writer()
            .counter(self.uav_id)
            .counter(self.ack_round)
            .real(self.issued_at)
            .cells(self.assignment_slice)
            .real(self.params.heuristic_weight)
            .real(self.params.replan_confidence_threshold)
            .counter(self.params.sync_interval)
            .cells(sorted(self.constraints.no_fly_cells, key=cell_order))
            .real(self.constraints.energy_reserve_floor)
        )
        return self.refresh.write(w).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "StrategyUpdate":
        r = Reader(data)
        uav_id, ack_round, issued_at = r.counter(), r.counter(), r.real()
        slice_ = tuple(r.cells())
        params = PlannerParams(r.real(), r.real(), r.counter())
        constraints = ConstraintSet(frozenset(r.cells()), r.real())
        refresh = RefreshDirective.read(r)
        r.done()
        return cls(uav_id, ack_round, slice_, params, constraints, refresh, issued_at)

    @property
    def payload_bytes(self) -> int:
        return len(self.to_bytes())


@dataclass(frozen=True)
class FullState:
    """Everything a UAV knows this tick, shipped raw to the base station."""

    uav_id: int
    timestamp: float
    position: Cell
    energy: float
    decision_count: int
    residual: Tuple[Cell, ...]
    revealed: Tuple[Tuple[Cell, int], ...]

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .counter(self.uav_id)
            .real(self.timestamp)
            .cell(self.position)
            .real(self.energy)
            .counter(self.decision_count)
            .cells(self.residual)
            .deltas(self.revealed)
            .getvalue()
        )


@dataclass(frozen=True)
class Command:
    uav_id: int
    next_cell: Cell
    issued_at: float

    def to_bytes(self) -> bytes:
        return Writer().counter(self.uav_id).cell(self.next_cell).real(self.issued_at).getvalue()


@dataclass(frozen=True)
class CollabRequest:
    uav_id: int
    timestamp: float
    position: Cell
    reason: int
    command: Optional[Cell] = None

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .counter(self.uav_id)
            .real(self.timestamp)
            .cell(self.position)
            .code(self.reason)
            .cell(self.command)
            .getvalue()
        )


COLLAB_REQUEST_BYTES = len(CollabRequest(0, 0.0, (0, 0), 0).to_bytes())


# ---------------------------------------------------------------------------
# Verdicts, actions, records
# ---------------------------------------------------------------------------


class FallbackReason(IntEnum):
    OUT_OF_BOUNDS = 1
    KNOWN_OBSTACLE = 2
    NO_FLY_VIOLATION = 3
    ENERGY_RESERVE = 4
    LOW_CONFIDENCE = 5
    NO_PATH = 6


@dataclass(frozen=True)
class ValidationVerdict:
    reason: Optional[FallbackReason] = None
    command: Optional[Cell] = None
    confidence: float = 1.0

    @property
    def is_valid(self) -> bool:
        return self.reason is None

    @classmethod
    def fallback(cls, reason: FallbackReason, command: Optional[Cell] = None,
                 confidence: float = 1.0) -> "ValidationVerdict":
        return cls(reason, command, confidence)


class ActionKind(str, Enum):
    MOVE = "move"
    HOVER = "hover"
    LAND = "land"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    cell: Cell


class SyncOutcome(str, Enum):
    SKIPPED = "Skipped"
    SENT = "Sent"
    SENT_AND_APPLIED = "SentAndApplied"


@dataclass
class MetricsRecord:
    """One completed decision; latency is the sum of its charged components."""

    uav_id: int
    tick: int
    decision: int = 0
    inference: float = 0.0
    tool: float = 0.0
    transfer: float = 0.0
    waiting: float = 0.0
    moved: bool = False
    fallback: Optional[FallbackReason] = None
    sync: Optional[SyncOutcome] = None

    @property
    def latency(self) -> float:
        return self.inference + self.tool + self.transfer + self.waiting


@dataclass(frozen=True)
class ActionRecord:
    tick: int
    frm: Cell
    to: Cell
    energy_after: float
    reserve_floor: float
    no_fly: FrozenSet[Cell]


@dataclass
class EnergyLedger:
    inference: float = 0.0
    tool: float = 0.0
    flight: float = 0.0
    hover: float = 0.0
    transmit: float = 0.0

    @property
    def total(self) -> float:
        return self.inference + self.tool + self.flight + self.hover + self.transmit

    def as_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


@dataclass
class PendingSync:
    summary: EpisodeSummary
    message: Message
    outcome: DeliveryOutcome

    @property
    def sent_at(self) -> float:
        return self.message.created_at


@dataclass
class PendingRequest:
    message: Message
    tool_latency: float = 0.0
    delivered_at: Optional[float] = None


# ---------------------------------------------------------------------------
# UAV agent
# ---------------------------------------------------------------------------


class UavAgent:
    """
    On-board agent. `collaborative` turns on collaboration requests and sync;
    without it the agent is the purely local loop.
    """

    def __init__(
        self,
        state: UavState,
        *,
        constraints: ConstraintSet = ConstraintSet(),
        costs: CostModel = CostModel(),
        tools: Optional[ToolRegistry] = None,
        sensor_radius: int = 3,
        memory_capacity: int = STM_CAPACITY,
        collaborative: bool = False,
        sync_timeout: float = SYNC_TIMEOUT,
        fallback_trigger: int = FALLBACK_TRIGGER,
    ) -> None:
        self.state = state
        self.constraints = constraints
        self.costs = costs
        self.tools = tools if tools is not None else ToolRegistry()
        self.sensor_radius = sensor_radius
        self.stm = ShortTermMemory(memory_capacity)
        self.collaborative = collaborative
        self.sync_timeout = sync_timeout
        self.fallback_trigger = fallback_trigger

        self.alive = True
        self.landed = False
        self.failure: Optional[str] = None
        self.target: Optional[Cell] = None
        self.path: Optional[Path] = None
        self.dstar: Optional[DStarPlanner] = None
        self.follow_order = False
        self.bs_known: Set[Cell] = set()
        self.pending_request: Optional[PendingRequest] = None
        self._plan_params: Optional[PlannerParams] = None
        self._unsynced: Set[Cell] = set()
        self._new_obstacles: Set[Cell] = set()
        self._reported: Dict[int, FrozenSet[Cell]] = {}
        self._low_confidence_streak = 0
        self._last_delta: Optional[ObservationDelta] = None
        # route the residual is masked against, and the round that assigned it
        self.route: Tuple[Cell, ...] = tuple(state.residual_waypoints)
        self.route_round = 0

        self.energy = EnergyLedger()
        self.ledger = ToolLedger()
        self.records: List[MetricsRecord] = []
        self.actions: List[ActionRecord] = []
        self.trajectory: List[Cell] = [state.position]
        self.sync_attempts: List[int] = []
        self.completion_times: Dict[Cell, float] = {}
        self.fallback_count = 0
        self.collab_sent = 0
        self.summary_bytes = 0
        self.raw_window_bytes = 0

    @property
    def id(self) -> int:
        return self.state.id

    # -- accounting -------------------------------------------------------

    def _spend(self, amount: float, bucket: str) -> None:
        if amount > self.state.energy:
            raise EnergyExhausted(self.id, self.state.energy, amount)
        self.state.energy -= amount
        setattr(self.energy, bucket, getattr(self.energy, bucket) + amount)

    def charge_transmit(self, payload_bytes: int) -> None:
        """Transmit energy is paid when the uplink is actually delivered."""
        amount = min(self.costs.e_tx * payload_bytes, self.state.energy)
        self.state.energy -= amount
        self.energy.transmit += amount

    def send(self, channel: Channel, msg: Message, now: float) -> DeliveryOutcome:
        outcome = channel.send(msg, now)
        if outcome.delivered:
            self.charge_transmit(msg.payload_bytes)
        return outcome

    def use_tool(self, tags: Sequence[str], now: float) -> float:
        """Best on-board tool for `tags`; built-in (free) when none qualifies."""
        query = ToolQuery(frozenset(tags), Tier.ONBOARD, self.state.energy, 1)
        picks = select_topk(self.tools, query)
        if not picks:
            return 0.0
        before = self.state.energy
        try:
            receipt: InvocationReceipt = invoke(picks[0], self.state)
        except InsufficientEnergy:
            return 0.0
        self.energy.tool += before - self.state.energy
        self.ledger.add(receipt)
        record(self.stm, MemoryEntry(now, EntryKind.TOOL_INVOCATION,
                                     code=0, value=receipt.latency_cost))
        return receipt.latency_cost

    def tick_budget(self, inference: float, uplink_bytes: int = 0) -> float:
        """Most energy one tick can draw before its action is logged."""
        tools = sum(t.energy_cost for t in self.tools.tools() if t.tier is Tier.ONBOARD)
        move = max(self.costs.e_flight, self.costs.e_hover)
        return inference + tools + move + self.costs.e_tx * uplink_bytes

    def must_land(self, inference: float, uplink_bytes: int = 0) -> bool:
        """With a positive reserve floor, land before a tick could take energy under it."""
        floor = self.constraints.energy_reserve_floor
        return floor > 0 and self.state.energy - self.tick_budget(inference, uplink_bytes) < floor

    def land(self, tick: int) -> Action:
        self.alive = False
        self.landed = True
        left = len(self.state.residual_waypoints)
        if left:
            self.failure = (f"landed at tick {tick} on energy reserve "
                            f"{self.constraints.energy_reserve_floor:g} with {left} waypoints left")
            logger.warning("✗ UAV %d %s", self.id, self.failure)
        else:
            logger.info("✓ UAV %d landed at tick %d, mission slice done", self.id, tick)
        return Action(ActionKind.LAND, self.state.position)

    def _fail(self, exc: Exception) -> MissionFailed:
        self.alive = False
        self.failure = str(exc)
        logger.warning("✗ UAV %d failed: %s", self.id, exc)
        return MissionFailed(self.id, exc)

    # -- perception ---------------------------------------------------------

    def perceive(self, world, now: float) -> Tuple[float, List[Cell]]:
        """Sense, fold the delta into the local map, confirm a reached waypoint."""
        latency = self.use_tool(("sense",), now)
        delta = observe(world, self.state, self.sensor_radius, now)
        self._last_delta = delta
        changed = self.state.local_map.apply(delta)
        self._unsynced.update(changed)
        self._new_obstacles.update(c for c in changed if self.state.local_map.is_known_obstacle(c))
        reached = self._mark_reached(now)
        record(self.stm, MemoryEntry(now, EntryKind.OBSERVATION,
                                     cells=tuple(reached), deltas=delta.revealed))
        return latency, reached

    def _mark_reached(self, now: float) -> List[Cell]:
        pos = self.state.position
        if pos not in self.state.residual_waypoints:
            return []
        self.state.residual_waypoints.remove(pos)
        self.state.completed.append(pos)
        self.completion_times[pos] = now
        if self.target == pos:
            self._drop_plan()
        return [pos]

    # -- planning -----------------------------------------------------------

    def _drop_plan(self) -> None:
        self.target = None
        self.path = None
        self.dstar = None
        self._low_confidence_streak = 0

    def select_target(self) -> Cell:
        residual = self.state.residual_waypoints
        if self.target is not None and self.target in residual:
            return self.target
        self._drop_plan()
        if self.follow_order:
            self.target = residual[0]
        else:
            self.target = next_waypoint_greedy(self.state, self.constraints.no_fly_cells)
        return self.target

    def plan(self, now: float) -> Tuple[Path, float]:
        """Current path to the target; replans only when something invalidated it."""
        params = self.state.planner_params
        pos = self.state.position
        remaining = self.path.advance(pos) if self.path is not None else None
        stale = (
            remaining is None
            or remaining.goal != self.target
            or params != self._plan_params
            or remaining.touches(self._new_obstacles)
        )
        if not stale:
            self.path = remaining
            self._new_obstacles.clear()
            return remaining, 0.0

        no_fly = self.constraints.no_fly_cells
        incremental = params.heuristic_weight == 1.0
        latency = self.use_tool(("plan", "incremental") if incremental else ("plan", "weighted"), now)
        local = self.state.local_map
        if incremental:
            if self.dstar is None or self.dstar.goal != self.target or params != self._plan_params:
                self.dstar = DStarPlanner.for_map(local, self.target, no_fly)
                path = dstar_replan(self.dstar, local, pos, None, no_fly)
            else:
                changes = tuple((c, int(local.state(c))) for c in sorted(self._unsynced, key=cell_order))
                path = dstar_replan(self.dstar, local, pos, ObservationDelta(changes, now), no_fly)
        else:
            self.dstar = None
            path = astar(local, pos, self.target, params.heuristic_weight, no_fly)
        self._unsynced.clear()
        self._new_obstacles.clear()
        self._plan_params = params
        self.path = path
        return path, latency

    # -- acting ---------------------------------------------------------------

    def move(self, cell: Cell, tick: int) -> Action:
        frm = self.state.position
        step, energy = move_cost(frm, cell, self.costs)
        self.state = apply_move(self.state, cell, self.costs)
        if step:
            self.energy.flight += energy
        else:
            self.energy.hover += energy
        self.actions.append(ActionRecord(tick, frm, cell, self.state.energy,
                                         self.constraints.energy_reserve_floor,
                                         self.constraints.no_fly_cells))
        self.trajectory.append(cell)
        return Action(ActionKind.MOVE if step else ActionKind.HOVER, cell)

    def hover(self, tick: int) -> Action:
        return self.move(self.state.position, tick)

    def _decided(self, rec: MetricsRecord, frm: Cell, now: float) -> MetricsRecord:
        self.state.decision_count += 1
        rec.decision = self.state.decision_count
        record(self.stm, MemoryEntry(now, EntryKind.DECISION,
                                     cells=(frm, self.state.position),
                                     code=int(rec.moved), value=rec.latency))
        self.records.append(rec)
        return rec

    # -- strategy -----------------------------------------------------------

    def apply_strategy(self, update: StrategyUpdate) -> None:
        old_target = self.target
        params_changed = update.params != self.state.planner_params
        constraints_changed = update.constraints != self.constraints
        self.state.residual_waypoints = list(update.assignment_slice)
        self.route = tuple(update.assignment_slice)
        self.route_round = update.ack_round
        self.state.planner_params = update.params
        self.constraints = update.constraints
        apply_refresh(self.stm, update.refresh)
        self.stm.mark_synced(update.ack_round)
        self.bs_known |= self._reported.pop(update.ack_round, frozenset())
        for r in [r for r in self._reported if r < update.ack_round]:
            del self._reported[r]
        self.follow_order = True
        residual = self.state.residual_waypoints
        if params_changed or constraints_changed or not residual or residual[0] != old_target:
            self._drop_plan()


# ---------------------------------------------------------------------------
# UAV operations
# ---------------------------------------------------------------------------


def validate(command: Cell, state: UavState, constraints: ConstraintSet,
             planned_path: Optional[Path], cost_model: CostModel = CostModel(),
             threshold: Optional[float] = None) -> ValidationVerdict:
    """Checks run in a fixed order; the first failure names the fallback."""
    local = state.local_map
    if not local.in_bounds(command):
        return ValidationVerdict.fallback(FallbackReason.OUT_OF_BOUNDS, command)
    if local.is_known_obstacle(command):
        return ValidationVerdict.fallback(FallbackReason.KNOWN_OBSTACLE, command)
    if command in constraints.no_fly_cells:
        return ValidationVerdict.fallback(FallbackReason.NO_FLY_VIOLATION, command)
    _, energy = move_cost(state.position, command, cost_model)
    if state.energy - energy < constraints.energy_reserve_floor:
        return ValidationVerdict.fallback(FallbackReason.ENERGY_RESERVE, command)
    rho = state.planner_params.replan_confidence_threshold if threshold is None else threshold
    conf = 1.0
    if planned_path is not None:
        conf = confidence(state.position, planned_path.goal, planned_path)
    if conf < rho:
        return ValidationVerdict.fallback(FallbackReason.LOW_CONFIDENCE, command, conf)
    return ValidationVerdict(None, command, conf)


def handle_fallback(agent: UavAgent, verdict: ValidationVerdict,
                    channel: Optional[Channel] = None, now: float = 0.0,
                    tick: int = 0) -> Action:
    """Hover, remember why, and ask the base station for help."""
    pos = agent.state.position
    agent.fallback_count += 1
    record(agent.stm, MemoryEntry(now, EntryKind.FALLBACK,
                                  cells=(pos, verdict.command or pos),
                                  code=int(verdict.reason)))
    if agent.collaborative and channel is not None:
        body = CollabRequest(agent.id, now, pos, int(verdict.reason), verdict.command)
        agent.send(channel, Message.wrap(MessageKind.COLLAB_REQUEST, body, agent.id, BS_ID, now), now)
        agent.collab_sent += 1
    logger.debug("UAV %d fallback %s at %s", agent.id, verdict.reason.name, pos)
    if verdict.reason is FallbackReason.ENERGY_RESERVE and agent.constraints.energy_reserve_floor > 0:
        return agent.land(tick)
    return agent.hover(tick)


def uav_tick(agent: UavAgent, world, channel: Optional[Channel], now: float,
             tick: int = 0) -> Tuple[Action, Optional[MetricsRecord]]:
    """One perceive–decide–validate–act pass. Raises MissionFailed on energy exhaustion."""
    if not agent.alive:
        return Action(ActionKind.HOVER, agent.state.position), None
    uplink = COLLAB_REQUEST_BYTES if agent.collaborative and channel is not None else 0
    if agent.must_land(agent.costs.e_slm, uplink):
        return agent.land(tick), None

    rec = MetricsRecord(agent.id, tick, inference=agent.costs.t_slm)
    frm = agent.state.position
    try:
        agent._spend(agent.costs.e_slm, "inference")
        latency, _ = agent.perceive(world, now)
        rec.tool += latency

        if not agent.state.residual_waypoints:
            action = agent.hover(tick)
        else:
            verdict = _decide(agent, rec, now)
            if verdict.is_valid:
                action = agent.move(verdict.command, tick)
            else:
                rec.fallback = verdict.reason
                action = handle_fallback(agent, verdict, channel, now, tick)
    except EnergyExhausted as exc:
        raise agent._fail(exc) from exc

    rec.moved = action.kind is ActionKind.MOVE
    agent._decided(rec, frm, now)
    return action, rec


def _decide(agent: UavAgent, rec: MetricsRecord, now: float) -> ValidationVerdict:
    try:
        agent.select_target()
        path, latency = agent.plan(now)
    except (NoReachableWaypoint, NoPath):
        agent._drop_plan()
        return ValidationVerdict.fallback(FallbackReason.NO_PATH)
    rec.tool += latency

    # repeated low-confidence holds on one target escalate to accepting the detour
    override = 0.0 if agent._low_confidence_streak >= agent.fallback_trigger else None
    verdict = validate(path.next_cell(), agent.state, agent.constraints, path,
                       agent.costs, override)
    if verdict.reason is FallbackReason.LOW_CONFIDENCE:
        agent._low_confidence_streak += 1
    elif verdict.is_valid and override is None:
        agent._low_confidence_streak = 0
    return verdict


def begin_sync(agent: UavAgent, channel: Channel, now: float) -> Optional[PendingSync]:
    """Uplink a summary when the decision count hits the cadence; None otherwise."""
    k = agent.state.planner_params.sync_interval
    count = agent.state.decision_count
    if not agent.alive or count == 0 or count % k != 0:
        return None
    agent.sync_attempts.append(count)
    summary = summarize(agent.stm, agent.bs_known, agent.state, now, agent.route, agent.route_round)
    agent._reported[summary.sync_round] = frozenset(c for c, _ in summary.obstacle_deltas)
    agent.summary_bytes += summary.payload_bytes
    agent.raw_window_bytes += summary.new_raw_bytes
    msg = Message.wrap(MessageKind.SEMANTIC_SUMMARY, summary, agent.id, BS_ID, now)
    outcome = agent.send(channel, msg, now)
    return PendingSync(summary, msg, outcome)


def finish_sync(agent: UavAgent, pending: PendingSync,
                reply: Optional[Tuple[StrategyUpdate, DeliveryOutcome]]) -> SyncOutcome:
    """Apply a reply that made it within τ, else give up after waiting τ."""
    rec = agent.records[-1] if agent.records else None
    if rec is not None and rec.decision != agent.state.decision_count:
        rec = None
    now = pending.sent_at

    if reply is not None and reply[1].delivered and reply[1].at - pending.sent_at <= agent.sync_timeout:
        update, outcome = reply
        if rec is not None:
            up = pending.outcome.at - pending.sent_at
            down = outcome.at - update.issued_at
            rec.transfer += up + down
            rec.waiting += (outcome.at - pending.sent_at) - up - down
        agent.apply_strategy(update)
        result = SyncOutcome.SENT_AND_APPLIED
    else:
        if rec is not None:
            rec.waiting += agent.sync_timeout
        result = SyncOutcome.SENT
    if rec is not None:
        rec.sync = result
    record(agent.stm, MemoryEntry(now, EntryKind.SYNC_MARKER, code=int(result is SyncOutcome.SENT_AND_APPLIED),
                                  value=float(pending.summary.sync_round)))
    return result


def maybe_sync(agent: UavAgent, channel: Channel, now: float,
               base_station: Optional["BaseStation"] = None) -> SyncOutcome:
    """Single-UAV sync exchange; the simulation runs the same steps for all UAVs at once."""
    pending = begin_sync(agent, channel, now)
    if pending is None:
        return SyncOutcome.SKIPPED
    replies: Dict[int, Tuple[StrategyUpdate, DeliveryOutcome]] = {}
    if base_station is not None and pending.outcome.delivered:
        replies = base_station.serve_round(channel, now, [(pending.message, pending.outcome)])
    return finish_sync(agent, pending, replies.get(agent.id))


# ---------------------------------------------------------------------------
# Base station
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UavHealth:
    latency_mean: float = 0.0
    latency_max: float = 0.0
    fallback_count: int = 0
    energy: float = 0.0


@dataclass
class GlobalView:
    known: Optional[LocalMapCache] = None
    positions: Dict[int, Cell] = field(default_factory=dict)
    residual: Dict[int, Tuple[Cell, ...]] = field(default_factory=dict)
    completed: Dict[int, Tuple[Cell, ...]] = field(default_factory=dict)
    health: Dict[int, UavHealth] = field(default_factory=dict)
    rounds: Dict[int, int] = field(default_factory=dict)
    params: Dict[int, PlannerParams] = field(default_factory=dict)
    constraints: ConstraintSet = ConstraintSet()
    terrain: Optional[GridMap] = None

    @property
    def uav_ids(self) -> List[int]:
        return sorted(self.positions)

    @property
    def is_empty(self) -> bool:
        return not self.positions

    def routing_grid(self) -> GridMap:
        """True terrain when the BS has it, else the merged known map (Unknown as Free)."""
        if self.terrain is not None:
            return self.terrain.with_blocked(self.constraints.no_fly_cells)
        grid = GridMap.from_obstacles(self.known.width, self.known.height, self.known.known_obstacles())
        return grid.with_blocked(self.constraints.no_fly_cells)


def bs_aggregate(summaries: Sequence[EpisodeSummary],
                 width: Optional[int] = None, height: Optional[int] = None,
                 base: Optional[LocalMapCache] = None) -> GlobalView:
    """
    Align by (sync_round, uav_id), merge obstacle reports last-writer-wins by
    timestamp, keep the latest position / residual / health per UAV.
    """
    if base is not None:
        known = base.copy()
    elif width is not None and height is not None:
        known = LocalMapCache(width, height)
    else:
        known = None
    view = GlobalView(known=known)
    for s in sorted(summaries, key=lambda s: (s.sync_round, s.uav_id)):
        if known is not None:
            merge_deltas(known, s.obstacle_deltas, s.timestamp)
        if s.position is not None:
            view.positions[s.uav_id] = s.position
        view.residual[s.uav_id] = tuple(s.residual)
        view.completed[s.uav_id] = tuple(s.waypoints_completed)
        view.health[s.uav_id] = UavHealth(s.latency_mean, s.latency_max, s.fallback_count, s.energy)
        view.rounds[s.uav_id] = s.sync_round
    return view


@dataclass(frozen=True)
class ReflectionRules:
    fallback_trigger: int = FALLBACK_TRIGGER
    weight_step: float = WEIGHT_STEP
    confidence_step: float = CONFIDENCE_STEP
    latency_budget: float = LATENCY_BUDGET
    weight_cap: float = HEURISTIC_WEIGHT_CAP
    confidence_floor: float = CONFIDENCE_FLOOR
    window_rounds: int = 2


@dataclass
class Reflection:
    params: Dict[int, PlannerParams]
    fired: Set[int] = field(default_factory=set)  # UAVs whose fallback rule triggered


def bs_reflect(view: GlobalView, history: Optional[LongTermStore],
               rules: ReflectionRules = ReflectionRules()) -> Reflection:
    out = Reflection(params={})
    for uav in view.uav_ids:
        p = view.params.get(uav, PlannerParams())
        w, rho = p.heuristic_weight, p.replan_confidence_threshold
        recent = history.recent(uav, rules.window_rounds) if history is not None else []
        if recent:
            fallbacks = sum(e.fallback_count for e in recent)
        else:
            fallbacks = view.health.get(uav, UavHealth()).fallback_count
        if fallbacks > rules.fallback_trigger:
            w = max(1.0, w - rules.weight_step)
            rho = min(rho, max(rules.confidence_floor, rho - rules.confidence_step))
            out.fired.add(uav)
        if view.health.get(uav, UavHealth()).latency_mean > rules.latency_budget:
            w = min(rules.weight_cap, w + rules.weight_step)
        out.params[uav] = PlannerParams(w, rho, p.sync_interval)
    return out


@dataclass
class PlanOutcome:
    updates: Dict[int, StrategyUpdate]
    latency: float
    energy: float
    evaluations: int = 0
    assignment: Optional[Assignment] = None
    receipts: List[InvocationReceipt] = field(default_factory=list)


def _ground_tools(tools: Optional[ToolRegistry], tags: Sequence[str]) -> List[InvocationReceipt]:
    if tools is None:
        return []
    picks = select_topk(tools, ToolQuery(frozenset(tags), Tier.GROUND, k=1))
    return [invoke(picks[0])] if picks else []


def _refresh_for(uav: int, slice_: Tuple[Cell, ...], view: GlobalView,
                 reflection: Optional[Reflection], keep: int) -> RefreshDirective:
    if reflection is not None and uav in reflection.fired:
        return RefreshDirective.clear()
    if slice_ != view.residual.get(uav, ()):
        return RefreshDirective.truncate_to(keep)
    return RefreshDirective.none()


def bs_plan(view: GlobalView, ga: GaParams, *, costs: CostModel = CostModel(),
            tools: Optional[ToolRegistry] = None, reflection: Optional[Reflection] = None,
            refresh_keep: int = STM_REFRESH_KEEP) -> PlanOutcome:
    """GA over the residual waypoints of every UAV in the view; one update per UAV."""
    if view.is_empty:
        raise Infeasible("global view is empty")
    ids = view.uav_ids
    positions = [view.positions[i] for i in ids]
    waypoints = sorted({w for i in ids for w in view.residual.get(i, ())}, key=cell_order)
    current = Assignment(routes=tuple(tuple(view.residual.get(i, ())) for i in ids), objective=0)
    run = ga_evolve(view.routing_grid(), positions, waypoints, ga, seeds=[current])

    receipts = _ground_tools(tools, ("plan", "global"))
    latency = costs.t_llm + run.evaluations * GA_EVAL_SECONDS + sum(r.latency_cost for r in receipts)
    energy = costs.e_llm + sum(r.energy_cost for r in receipts)

    updates: Dict[int, StrategyUpdate] = {}
    for k, uav in enumerate(ids):
        slice_ = run.assignment.routes[k]
        params = reflection.params[uav] if reflection is not None else view.params.get(uav, PlannerParams())
        updates[uav] = StrategyUpdate(
            uav_id=uav,
            ack_round=view.rounds.get(uav, 0),
            assignment_slice=slice_,
            params=params,
            constraints=view.constraints,
            refresh=_refresh_for(uav, slice_, view, reflection, refresh_keep),
        )
    return PlanOutcome(updates, latency, energy, run.evaluations, run.assignment, receipts)


class BaseStation:
    """Ground-side slow loop: long-term store, reflection, GA planning, downlink."""

    def __init__(self, scenario, store: Optional[LongTermStore] = None) -> None:
        a = scenario.agents
        self.grid: GridMap = scenario.grid
        self.constraints: ConstraintSet = scenario.constraints
        self.routing = scenario.grid.with_blocked(scenario.constraints.no_fly_cells)
        self.costs: CostModel = scenario.costs
        self.tools: ToolRegistry = scenario.tools
        self.ga: GaParams = scenario.ga
        self.sync_timeout = a.sync_timeout
        self.refresh_keep = scenario.memory.refresh_keep
        self.rules = ReflectionRules(
            fallback_trigger=a.fallback_trigger,
            weight_step=a.weight_step,
            confidence_step=a.confidence_step,
            latency_budget=a.latency_budget,
        )
        self.store = store if store is not None else LongTermStore(scenario.width, scenario.height)
        self.params: Dict[int, PlannerParams] = {
            i: scenario.planner_params for i in range(len(scenario.starts))
        }
        self.energy = 0.0
        self.plans = 0
        self.rounds_served = 0
        self.stale_summaries = 0
        self.collab_requests: List[CollabRequest] = []
        self.receipts: List[InvocationReceipt] = []
        self.last_slices: Dict[int, Tuple[Cell, ...]] = {}
        self._last_participants: Tuple[int, ...] = ()
        self.routes: Dict[int, List[Cell]] = {}
        # every route handed to a UAV, by (uav, round); round 0 is the pre-flight brief
        brief = nearest_start_partition(list(scenario.starts), list(scenario.waypoints))
        self.assigned: Dict[Tuple[int, int], Tuple[Cell, ...]] = {
            (uav, 0): tuple(route) for uav, route in brief.items()
        }

    # -- SLM-LLM rounds -----------------------------------------------------

    def serve_round(self, channel: Channel, now: float,
                    arrivals: Sequence[Tuple[Message, DeliveryOutcome]]
                    ) -> Dict[int, Tuple[StrategyUpdate, DeliveryOutcome]]:
        """
        Ingest every delivered summary; plan only over the ones sent this tick
        whose reply can still land within τ of their send time.
        """
        fresh: List[Tuple[Message, DeliveryOutcome]] = []
        for msg, outcome in arrivals:
            if msg.kind is MessageKind.COLLAB_REQUEST:
                self.collab_requests.append(msg.body)
                continue
            if msg.kind is not MessageKind.SEMANTIC_SUMMARY:
                continue
            summary = self.resolve(msg.body)
            if summary is None:
                continue
            msg = dataclasses.replace(msg, body=summary)
            try:
                ingest(self.store, summary)
            except DuplicateEpisode:
                continue
            if msg.created_at == now and outcome.at - msg.created_at <= self.sync_timeout:
                fresh.append((msg, outcome))
            else:
                self.stale_summaries += 1
        if not fresh:
            return {}

        summaries = [m.body for m, _ in fresh]
        view = self._view(summaries)
        reflection = bs_reflect(view, self.store, self.rules)
        replan = self._needs_replan(view, reflection)

        fusion = select_topk(self.tools, ToolQuery(frozenset({"aggregate"}), Tier.GROUND, k=1))
        planner = select_topk(self.tools, ToolQuery(frozenset({"plan", "global"}), Tier.GROUND, k=1))
        n_wp = len({w for s in summaries for w in s.residual})
        compute = self.costs.t_llm + sum(t.latency_cost for t in fusion)
        if replan:
            compute += sum(t.latency_cost for t in planner)
            if n_wp:
                compute += self.ga.population * self.ga.generations * GA_EVAL_SECONDS
        reply_at = max(o.at for _, o in fresh) + compute

        # admit only UAVs whose reply (sized for the whole residual set) lands within τ
        worst = StrategyUpdate(0, 0, tuple((0, 0) for _ in range(n_wp)), PlannerParams(),
                               self.constraints, RefreshDirective()).payload_bytes
        arrival_bound = reply_at + channel.transfer_time(worst)
        admitted = [s for s, (m, _) in zip(summaries, fresh)
                    if arrival_bound - m.created_at <= self.sync_timeout]
        if not admitted:
            logger.debug("BS round at %.3f: no reply fits within τ", now)
            return {}
        if len(admitted) != len(summaries):
            view = self._view(admitted)
            reflection = bs_reflect(view, self.store, self.rules)
            replan = self._needs_replan(view, reflection)

        self.receipts.extend(invoke(t) for t in fusion)
        self.energy += self.costs.e_llm + sum(t.energy_cost for t in fusion)
        updates: Optional[Dict[int, StrategyUpdate]] = None
        if replan:
            try:
                outcome = bs_plan(view, replace_seed(self.ga, self.plans), costs=self.costs,
                                  tools=self.tools, reflection=reflection,
                                  refresh_keep=self.refresh_keep)
            except Infeasible as exc:
                logger.warning("⚠ BS replan skipped, keeping current routes: %s", exc)
            else:
                # bs_plan charges e_llm itself; it is already counted for this round
                self.energy += outcome.energy - self.costs.e_llm
                self.receipts.extend(outcome.receipts)
                self.plans += 1
                updates = outcome.updates
        if updates is None:
            updates = self._reuse(view, reflection)

        replies: Dict[int, Tuple[StrategyUpdate, DeliveryOutcome]] = {}
        for uav in sorted(updates):
            update = dataclasses.replace(updates[uav], issued_at=reply_at)
            msg = Message.wrap(MessageKind.STRATEGY_UPDATE, update, BS_ID, uav, reply_at)
            delivery = channel.send(msg, reply_at)
            replies[uav] = (update, delivery)
            self.last_slices[uav] = update.assignment_slice
            self.assigned[(uav, update.ack_round)] = update.assignment_slice
            self.params[uav] = update.params
        self._last_participants = tuple(sorted(updates))
        self.rounds_served += 1
        return replies

    def resolve(self, summary: EpisodeSummary) -> Optional[EpisodeSummary]:
        """Rebuild the residual route from the mask and the route it refers to."""
        key = (summary.uav_id, summary.route_round)
        route = self.assigned.get(key)
        if route is None:
            logger.warning("⚠ UAV %d summary refers to unknown route round %d",
                           summary.uav_id, summary.route_round)
            return None
        try:
            resolved = summary.resolve(route)
        except ValueError as exc:
            logger.warning("⚠ dropping summary: %s", exc)
            return None
        # the UAV never masks against an older route again
        for old in [k for k in self.assigned if k[0] == key[0] and k[1] < key[1]]:
            del self.assigned[old]
        return resolved

    def _view(self, summaries: Sequence[EpisodeSummary]) -> GlobalView:
        view = bs_aggregate(summaries, base=self.store.global_map)
        view.params = {i: self.params.get(i, PlannerParams()) for i in view.uav_ids}
        view.constraints = self.constraints
        view.terrain = self.grid
        return view

    def _needs_replan(self, view: GlobalView, reflection: Reflection) -> bool:
        if reflection.fired or tuple(view.uav_ids) != self._last_participants:
            return True
        for uav in view.uav_ids:
            residual = view.residual.get(uav, ())
            last = self.last_slices.get(uav)
            if last is None:
                return True
            remaining = set(residual)
            if not remaining <= set(last) or residual != tuple(w for w in last if w in remaining):
                return True
        return False

    def _reuse(self, view: GlobalView, reflection: Reflection) -> Dict[int, StrategyUpdate]:
        return {
            uav: StrategyUpdate(
                uav_id=uav,
                ack_round=view.rounds.get(uav, 0),
                assignment_slice=view.residual.get(uav, ()),
                params=reflection.params[uav],
                constraints=self.constraints,
                refresh=RefreshDirective.none(),
            )
            for uav in view.uav_ids
        }

    # -- G-LLM --------------------------------------------------------------

    def plan_initial(self, starts: Sequence[Cell], brief: Dict[int, List[Cell]]) -> Dict[int, List[Cell]]:
        """One GA plan before take-off on the true map, seeded with the pre-flight brief."""
        waypoints = sorted({w for ws in brief.values() for w in ws}, key=cell_order)
        seed = Assignment(routes=tuple(tuple(brief.get(i, ())) for i in range(len(starts))), objective=0)
        run = ga_evolve(self.routing, list(starts), waypoints, replace_seed(self.ga, 0), seeds=[seed])
        receipts = _ground_tools(self.tools, ("plan", "global"))
        self.receipts.extend(receipts)
        self.energy += self.costs.e_llm + sum(r.energy_cost for r in receipts)
        self.plans += 1
        self.routes = {i: list(route) for i, route in enumerate(run.assignment.routes)}
        return {i: list(route) for i, route in self.routes.items()}

    def serve_full_state(self, channel: Channel, msg: Message,
                         delivered_at: float) -> Tuple[Command, DeliveryOutcome]:
        """Per-decision central planning: next step on the true-map shortest path."""
        state: FullState = msg.body
        route = [w for w in self.routes.get(state.uav_id, []) if w in state.residual]
        if not route and state.residual:
            route = [min(state.residual, key=lambda w: (manhattan(state.position, w), cell_order(w)))]
        self.routes[state.uav_id] = route
        self.energy += self.costs.e_llm
        issued = delivered_at + self.costs.t_llm
        cmd = Command(state.uav_id, self.next_step(state.position, route[0] if route else None), issued)
        out = channel.send(Message.wrap(MessageKind.COMMAND, cmd, BS_ID, state.uav_id, issued), issued)
        return cmd, out

    def next_step(self, position: Cell, target: Optional[Cell]) -> Cell:
        if target is None or target == position:
            return position
        dist = distance_field(self.routing, target)
        here = int(dist[position[1], position[0]])
        if here < 0:
            return position
        options = [c for c in neighbors4(position, self.grid.width, self.grid.height)
                   if int(dist[c[1], c[0]]) == here - 1]
        return min(options, key=cell_order)


def replace_seed(ga: GaParams, n: int) -> GaParams:
    return dataclasses.replace(ga, seed=derive_seed(ga.seed, f"plan-{n}"))


# ---------------------------------------------------------------------------
# G-LLM UAV step
# ---------------------------------------------------------------------------


def _full_state_bound(agent: UavAgent) -> int:
    """Largest FullState this UAV could uplink: every cell in sensor range revealed."""
    r = agent.sensor_radius
    bare = FullState(agent.id, 0.0, agent.state.position, 0.0, 0, tuple(agent.state.residual_waypoints), ())
    return len(bare.to_bytes()) + DELTA_BYTES * (2 * r + 1) ** 2


def gllm_tick(agent: UavAgent, world, channel: Channel, base: BaseStation,
              now: float, tick: int = 0) -> Tuple[Action, Optional[MetricsRecord]]:
    """
    Fully offloaded step: sense, uplink FullState, execute the returned
    Command. While the request is undelivered the UAV hovers; the wait is
    charged to the decision that finally completes.
    """
    if not agent.alive:
        return Action(ActionKind.HOVER, agent.state.position), None
    if agent.must_land(0.0, _full_state_bound(agent)):
        return agent.land(tick), None
    frm = agent.state.position
    try:
        latency, _ = agent.perceive(world, now)
        if agent.pending_request is None:
            if not agent.state.residual_waypoints:
                return agent.hover(tick), None
            delta = agent._last_delta
            body = FullState(agent.id, now, frm, agent.state.energy, agent.state.decision_count,
                             tuple(agent.state.residual_waypoints), delta.revealed if delta else ())
            msg = Message.wrap(MessageKind.FULL_STATE, body, agent.id, BS_ID, now)
            outcome = agent.send(channel, msg, now)
            agent.pending_request = PendingRequest(msg, delivered_at=outcome.at if outcome.delivered else None)
        pending = agent.pending_request
        pending.tool_latency += latency
        if pending.delivered_at is None:
            return agent.hover(tick), None

        cmd, out = base.serve_full_state(channel, pending.message, pending.delivered_at)
        agent.pending_request = None
        up = channel.transfer_time(pending.message.payload_bytes)
        rec = MetricsRecord(
            agent.id, tick,
            inference=agent.costs.t_llm,
            tool=pending.tool_latency,
            transfer=up + (out.at - cmd.issued_at if out.delivered else 0.0),
            waiting=(pending.delivered_at - pending.message.created_at) - up,
        )
        verdict = validate(cmd.next_cell, agent.state, agent.constraints, None, agent.costs)
        if verdict.is_valid:
            action = agent.move(cmd.next_cell, tick)
        else:
            rec.fallback = verdict.reason
            agent.fallback_count += 1
            if verdict.reason is FallbackReason.ENERGY_RESERVE and agent.constraints.energy_reserve_floor > 0:
                action = agent.land(tick)
            else:
                action = agent.hover(tick)
    except EnergyExhausted as exc:
        raise agent._fail(exc) from exc
    rec.moved = action.kind is ActionKind.MOVE
    agent._decided(rec, frm, now)
    return action, rec
