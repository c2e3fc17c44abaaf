"""
Experiment — the three collaboration modes, run reports, multi-seed comparison

    l-slm     on-board only, greedy targets, never talks to the ground
    g-llm     every decision is a FullState -> Command round trip through the BS
    slm-llm   on-board loop, semantic sync with the BS every K decisions
"""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from agents import (
    ActionRecord,
    BaseStation,
    MetricsRecord,
    MissionFailed,
    UavAgent,
    begin_sync,
    finish_sync,
    gllm_tick,
    uav_tick,
)
from config import BS_ID, CSV_COLUMNS, FLOAT_DECIMALS, TICK_SECONDS, logger
from helpers import Cell, make_rng, round6
from link import Channel, Message, MessageKind
from scenario import Scenario
from store import LongTermStore
from toolkit import InvocationReceipt, Tier
from world import LocalMapCache, UavState, nearest_start_partition


class SimulationError(Exception):
    """Base class for run-level failures."""


class TickLimitExceeded(SimulationError):
    def __init__(self, ticks: int, remaining: int) -> None:
        super().__init__(f"tick limit {ticks} reached with {remaining} waypoints left")
        self.ticks = ticks
        self.remaining = remaining


class Mode(str, Enum):
    L_SLM = "l-slm"
    G_LLM = "g-llm"
    SLM_LLM = "slm-llm"

    @classmethod
    def parse(cls, value: Union[str, "Mode"]) -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")


class RunStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"          # every UAV out of mission
    STRANDED = "stranded"      # survivors idle, waypoints of failed UAVs left
    TICK_LIMIT = "tick_limit"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class UavMetrics:
    uav_id: int
    traj_len: int
    decisions: int
    latency_sum: float
    max_latency: float
    energy: float
    energy_start: float
    energy_left: float
    energy_parts: Dict[str, float]
    uplink_bytes: int
    downlink_bytes: int
    fallbacks: int
    waypoints_done: int
    mission_time: float
    alive: bool = True

    @property
    def mean_latency(self) -> float:
        return self.latency_sum / self.decisions if self.decisions else 0.0


@dataclass
class RunReport:
    mode: Mode
    seed: int
    status: RunStatus
    ticks: int
    mission_time: float
    waypoints_total: int
    uavs: List[UavMetrics]
    bs_energy: float = 0.0
    summary_bytes: int = 0
    raw_window_bytes: int = 0
    failures: Dict[int, str] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    trajectories: Dict[int, List[Cell]] = field(default_factory=dict)
    sync_attempts: Dict[int, List[int]] = field(default_factory=dict)
    records: Dict[int, List[MetricsRecord]] = field(default_factory=dict)
    actions: Dict[int, List[ActionRecord]] = field(default_factory=dict)
    receipts: List[InvocationReceipt] = field(default_factory=list)
    link_trace: List[bool] = field(default_factory=list)
    sync_interval: int = 0

    # -- aggregates (sums over UAVs; latency weighted by decisions) ----------

    @property
    def traj_len(self) -> int:
        return sum(u.traj_len for u in self.uavs)

    @property
    def decisions(self) -> int:
        return sum(u.decisions for u in self.uavs)

    @property
    def mean_latency(self) -> float:
        n = self.decisions
        return sum(u.latency_sum for u in self.uavs) / n if n else 0.0

    @property
    def max_latency(self) -> float:
        return max((u.max_latency for u in self.uavs), default=0.0)

    @property
    def energy(self) -> float:
        return sum(u.energy for u in self.uavs)

    @property
    def uplink_bytes(self) -> int:
        return sum(u.uplink_bytes for u in self.uavs)

    @property
    def downlink_bytes(self) -> int:
        return sum(u.downlink_bytes for u in self.uavs)

    @property
    def fallbacks(self) -> int:
        return sum(u.fallbacks for u in self.uavs)

    @property
    def waypoints_done(self) -> int:
        return sum(u.waypoints_done for u in self.uavs)

    @property
    def compression_ratio(self) -> float:
        return self.summary_bytes / self.raw_window_bytes if self.raw_window_bytes else 0.0

    def rows(self) -> List[Dict[str, Any]]:
        """Per-UAV rows plus one `all` aggregate row, in CSV column order."""
        out = [
            _row(self.mode, self.seed, str(u.uav_id), u.traj_len, u.mean_latency, u.max_latency,
                 u.energy, u.uplink_bytes, u.downlink_bytes, u.fallbacks,
                 u.waypoints_done, u.mission_time)
            for u in self.uavs
        ]
        out.append(_row(self.mode, self.seed, "all", self.traj_len, self.mean_latency,
                        self.max_latency, self.energy, self.uplink_bytes, self.downlink_bytes,
                        self.fallbacks, self.waypoints_done, self.mission_time))
        return out

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=list(CSV_COLUMNS))


def _row(mode: Mode, seed: int, uav_id: str, traj_len: int, mean_latency: float,
         max_latency: float, energy: float, uplink: int, downlink: int, fallbacks: int,
         done: int, mission_time: float) -> Dict[str, Any]:
    return {
        "mode": Mode(mode).value,
        "seed": int(seed),
        "uav_id": uav_id,
        "traj_len": int(traj_len),
        "mean_latency": round6(mean_latency),
        "max_latency": round6(max_latency),
        "energy": round6(energy),
        "uplink_bytes": int(uplink),
        "downlink_bytes": int(downlink),
        "fallbacks": int(fallbacks),
        "waypoints_done": int(done),
        "mission_time": round6(mission_time),
    }


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


class Simulation:
    """
    One seeded run. Per tick: step the link once, drain what it held, then
    let every UAV act in id order (and, for slm-llm, sync afterwards).
    """

    def __init__(self, scenario: Scenario, mode: Union[str, Mode], seed: int,
                 store_path: Optional[Path] = None) -> None:
        self.scenario = sc = scenario.for_seed(seed)
        self.mode = Mode.parse(mode)
        self.seed = seed
        self.channel = Channel(sc.link)
        self.link_rng = make_rng(seed, "link")
        self.tick = 0
        self.now = 0.0
        self.errors: List[str] = []
        self._seen_deliveries = 0

        brief = nearest_start_partition(sc.starts, sc.waypoints)
        self.agents: List[UavAgent] = []
        for i, (start, energy) in enumerate(zip(sc.starts, sc.energies)):
            state = UavState(
                id=i,
                position=start,
                energy=energy,
                residual_waypoints=list(brief[i]),
                local_map=LocalMapCache(sc.width, sc.height),
                planner_params=sc.planner_params,
            )
            self.agents.append(UavAgent(
                state,
                constraints=sc.constraints,
                costs=sc.costs,
                tools=sc.tools,
                sensor_radius=sc.sensor_radius,
                memory_capacity=sc.memory.capacity,
                collaborative=self.mode is Mode.SLM_LLM,
                sync_timeout=sc.agents.sync_timeout,
                fallback_trigger=sc.agents.fallback_trigger,
            ))
        self.energy_start = {a.id: a.state.energy for a in self.agents}

        self.base: Optional[BaseStation] = None
        if self.mode is not Mode.L_SLM:
            self.base = BaseStation(sc, LongTermStore(sc.width, sc.height, store_path))
        if self.mode is Mode.G_LLM:
            routes = self.base.plan_initial(sc.starts, brief)
            for agent in self.agents:
                agent.state.residual_waypoints = list(routes[agent.id])
                agent.route = tuple(routes[agent.id])
                agent.follow_order = True

    # -- queries --------------------------------------------------------------

    @property
    def remaining(self) -> int:
        return sum(len(a.state.residual_waypoints) for a in self.agents)

    def finished(self) -> Optional[RunStatus]:
        alive = [a for a in self.agents if a.alive]
        if self.remaining == 0:
            return RunStatus.COMPLETED
        if not alive:
            return RunStatus.FAILED
        if all(not a.state.residual_waypoints for a in alive) and all(
            a.pending_request is None for a in alive
        ):
            return RunStatus.STRANDED
        return None

    # -- stepping -----------------------------------------------------------

    def step(self) -> None:
        self.now = self.tick * TICK_SECONDS
        self.channel.step(self.link_rng)
        self._route_drained(self.channel.drain(self.now))

        if self.mode is Mode.G_LLM:
            self._step_gllm()
        else:
            self._step_local()
        self._collect_requests()
        self.tick += 1

    def _act(self, fn, *args) -> None:
        try:
            fn(*args)
        except MissionFailed as exc:
            self.errors.append(str(exc))

    def _step_local(self) -> None:
        channel = self.channel if self.mode is Mode.SLM_LLM else None
        pending = []
        for agent in self.agents:
            if not agent.alive:
                continue
            self._act(uav_tick, agent, self.scenario.grid, channel, self.now, self.tick)
            if self.mode is Mode.SLM_LLM and agent.alive:
                p = begin_sync(agent, self.channel, self.now)
                if p is not None:
                    pending.append((agent, p))
        if not pending:
            return
        arrivals = [(p.message, p.outcome) for _, p in pending if p.outcome.delivered]
        replies = self.base.serve_round(self.channel, self.now, arrivals) if arrivals else {}
        for agent, p in pending:
            finish_sync(agent, p, replies.get(agent.id))

    def _step_gllm(self) -> None:
        for agent in self.agents:
            if agent.alive:
                self._act(gllm_tick, agent, self.scenario.grid, self.channel,
                          self.base, self.now, self.tick)

    def _route_drained(self, drained: Iterable[Tuple[Message, Any]]) -> None:
        """Uplinks held during an outage: charge the sender, hand them to the BS."""
        late = []
        for msg, outcome in drained:
            if not msg.is_uplink:
                logger.debug("late downlink %s to UAV %d discarded", msg.kind.value, msg.receiver)
                continue
            agent = self.agents[msg.sender]
            agent.charge_transmit(msg.payload_bytes)
            if msg.kind is MessageKind.FULL_STATE:
                req = agent.pending_request
                if req is not None and req.message is msg:
                    req.delivered_at = outcome.at
            elif msg.kind is MessageKind.SEMANTIC_SUMMARY:
                late.append((msg, outcome))
        if late and self.base is not None:
            self.base.serve_round(self.channel, self.now, late)

    def _collect_requests(self) -> None:
        delivered = self.channel.state.delivered
        if self.base is not None:
            for msg, _ in delivered[self._seen_deliveries:]:
                if msg.kind is MessageKind.COLLAB_REQUEST and msg.receiver == BS_ID:
                    self.base.collab_requests.append(msg.body)
        self._seen_deliveries = len(delivered)

    def run(self) -> RunReport:
        limit = self.scenario.tick_limit
        status = self.finished()
        while status is None and self.tick < limit:
            self.step()
            status = self.finished()
        if status is None:
            status = RunStatus.TICK_LIMIT
            exc = TickLimitExceeded(limit, self.remaining)
            self.errors.append(str(exc))
            logger.warning("⚠ %s (%s, seed %d)", exc, self.mode.value, self.seed)
        return self.report(status)

    # -- reporting ----------------------------------------------------------

    def report(self, status: RunStatus) -> RunReport:
        uavs = []
        for a in self.agents:
            up, down = self.channel.state.bytes_for(a.id)
            latencies = [r.latency for r in a.records]
            uavs.append(UavMetrics(
                uav_id=a.id,
                traj_len=a.state.trajectory_length,
                decisions=len(latencies),
                latency_sum=sum(latencies),
                max_latency=max(latencies, default=0.0),
                energy=a.energy.total,
                energy_start=self.energy_start[a.id],
                energy_left=a.state.energy,
                energy_parts=a.energy.as_dict(),
                uplink_bytes=up,
                downlink_bytes=down,
                fallbacks=a.fallback_count,
                waypoints_done=len(a.state.completed),
                mission_time=max(a.completion_times.values(), default=0.0),
                alive=a.alive,
            ))
        receipts = [r for a in self.agents for r in a.ledger.receipts]
        if self.base is not None:
            receipts.extend(self.base.receipts)
        return RunReport(
            mode=self.mode,
            seed=self.seed,
            status=status,
            ticks=self.tick,
            mission_time=self.tick * TICK_SECONDS,
            waypoints_total=len(self.scenario.waypoints),
            uavs=uavs,
            bs_energy=self.base.energy if self.base is not None else 0.0,
            summary_bytes=sum(a.summary_bytes for a in self.agents),
            raw_window_bytes=sum(a.raw_window_bytes for a in self.agents),
            failures={a.id: a.failure for a in self.agents if a.failure},
            errors=list(self.errors),
            trajectories={a.id: list(a.trajectory) for a in self.agents},
            sync_attempts={a.id: list(a.sync_attempts) for a in self.agents},
            records={a.id: list(a.records) for a in self.agents},
            actions={a.id: list(a.actions) for a in self.agents},
            receipts=receipts,
            link_trace=list(self.channel.state.trace),
            sync_interval=self.scenario.planner_params.sync_interval,
        )


def run(scenario: Scenario, mode: Union[str, Mode], seed: int,
        store_path: Optional[Path] = None) -> RunReport:
    sim = Simulation(scenario, mode, seed, store_path)
    report = sim.run()
    logger.info("✓ %s seed %d: %s after %d ticks, %d/%d waypoints, length %d",
                report.mode.value, seed, report.status.value, report.ticks,
                report.waypoints_done, report.waypoints_total, report.traj_len)
    return report


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

LATENCY_ORDER = (Mode.L_SLM, Mode.SLM_LLM, Mode.G_LLM)   # strictly increasing
LENGTH_ORDER = (Mode.G_LLM, Mode.SLM_LLM, Mode.L_SLM)    # non-decreasing
SUMMARY_METRICS = ("traj_len", "mean_latency", "max_latency", "energy",
                   "uplink_bytes", "downlink_bytes", "fallbacks",
                   "waypoints_done", "mission_time")


@dataclass
class ComparisonTable:
    runs: pd.DataFrame
    summary: pd.DataFrame
    verdicts: Dict[str, Optional[bool]]
    seeds: List[int]
    errors: List[str] = field(default_factory=list)

    @property
    def low_confidence(self) -> bool:
        return len(self.seeds) < 2


def _run_rows(job: Tuple[Scenario, str, int]) -> Tuple[str, int, List[Dict[str, Any]], Optional[str]]:
    scenario, mode, seed = job
    try:
        report = run(scenario, mode, seed)
    except Exception as exc:  # annotated in the table, never aborts the comparison
        return mode, seed, [], f"{mode} seed {seed}: {type(exc).__name__}: {exc}"
    note = f"{mode} seed {seed}: {report.status.value}" if report.status is not RunStatus.COMPLETED else None
    return mode, seed, report.rows(), note


def compare(scenario: Scenario, modes: Sequence[Union[str, Mode]], seeds: Sequence[int],
            workers: int = 1) -> ComparisonTable:
    """Every (mode, seed) run, merged in sorted key order whatever the worker count."""
    if not seeds:
        raise ValueError("compare needs at least one seed")
    mode_list = [Mode.parse(m) for m in modes]
    jobs = sorted(((scenario, m.value, int(s)) for m in mode_list for s in seeds),
                  key=lambda j: (j[1], j[2]))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_rows, jobs))
    else:
        results = [_run_rows(j) for j in jobs]

    rows: List[Dict[str, Any]] = []
    errors: List[str] = []
    for _, _, r, note in results:
        rows.extend(r)
        if note:
            errors.append(note)
    runs = pd.DataFrame(rows, columns=list(CSV_COLUMNS))
    summary = summarize_runs(runs)
    verdicts = ordering_verdicts(summary)
    for name, verdict in verdicts.items():
        logger.info("%s %s ordering: %s", "✓" if verdict else "✗", name,
                    "n/a" if verdict is None else ("PASS" if verdict else "FAIL"))
    return ComparisonTable(runs, summary, verdicts, [int(s) for s in seeds], errors)


def summarize_runs(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and std across seeds of the `all` rows, one row per mode."""
    agg = runs[runs["uav_id"] == "all"]
    if agg.empty:
        return pd.DataFrame(columns=["mode", "n"])
    grouped = agg.groupby("mode")[list(SUMMARY_METRICS)]
    mean = grouped.mean().add_suffix("_mean")
    std = grouped.std(ddof=0).add_suffix("_std")
    out = pd.concat([mean, std], axis=1)
    out.insert(0, "n", agg.groupby("mode").size())
    return out.reset_index()


def ordering_verdicts(summary: pd.DataFrame) -> Dict[str, Optional[bool]]:
    """None when some mode of an ordering is missing from the table."""
    by_mode = summary.set_index("mode") if not summary.empty else summary
    have = set(by_mode.index) if not summary.empty else set()

    def ordered(order: Tuple[Mode, ...], column: str, strict: bool) -> Optional[bool]:
        if not all(m.value in have for m in order):
            return None
        vals = [float(by_mode.loc[m.value, column]) for m in order]
        pairs = zip(vals, vals[1:])
        return all(a < b for a, b in pairs) if strict else all(a <= b for a, b in pairs)

    return {
        "latency": ordered(LATENCY_ORDER, "mean_latency_mean", strict=True),
        "length": ordered(LENGTH_ORDER, "traj_len_mean", strict=False),
    }


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

Emittable = Union[RunReport, ComparisonTable, pd.DataFrame]


def _frame_of(obj: Emittable) -> pd.DataFrame:
    if isinstance(obj, RunReport):
        return obj.frame()
    if isinstance(obj, ComparisonTable):
        return obj.runs
    return obj


def render(obj: Emittable, fmt: str = "csv") -> str:
    frame = _frame_of(obj)
    if fmt == "csv":
        buf = io.StringIO()
        frame.to_csv(buf, index=False, float_format=f"%.{FLOAT_DECIMALS}f", lineterminator="\n")
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")

    lines = []
    if isinstance(obj, RunReport):
        lines.append(f"mode={obj.mode.value} seed={obj.seed} status={obj.status.value} "
                     f"ticks={obj.ticks} bs_energy={obj.bs_energy:.{FLOAT_DECIMALS}f}")
    for row in frame.to_dict(orient="records"):
        lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    if isinstance(obj, ComparisonTable):
        for name, verdict in obj.verdicts.items():
            flag = "n/a" if verdict is None else ("PASS" if verdict else "FAIL")
            if obj.low_confidence and verdict is not None:
                flag += " (low-confidence n=1)"
            lines.append(f"verdict.{name}={flag}")
        lines.extend(f"error={e}" for e in obj.errors)
    return "\n".join(lines) + "\n"


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.{FLOAT_DECIMALS}f}"
    return str(value)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_fixed(0.1),
    retry=retry_if_exception_type(OSError),
    reraise=True,
    before_sleep=lambda rs: logger.warning(
        "⚠ Write failed, retrying (%d/3): %s", rs.attempt_number, rs.outcome.exception()
    ),
)
def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def emit(obj: Emittable, fmt: str = "csv", path: Optional[Union[str, Path]] = None) -> str:
    """Render and, when `path` is given, write. Returns the rendered text."""
    text = render(obj, fmt)
    if path is not None:
        _write(Path(path), text)
        logger.info("✓ Wrote %s (%d bytes)", path, len(text))
    return text


def read_table(source: Union[str, Path, io.StringIO]) -> pd.DataFrame:
    return pd.read_csv(source, dtype={"mode": str, "uav_id": str}, float_precision="round_trip")


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------


def audit_run(report: RunReport, scenario: Scenario) -> List[str]:
    """Conservation and safety checks over the full logs; empty list means clean."""
    problems: List[str] = []
    sc = scenario.for_seed(report.seed)
    obstacles = sc.grid.obstacles()
    tol = 1e-9

    for u in report.uavs:
        actions = report.actions.get(u.uav_id, [])
        moves = sum(1 for a in actions if a.to != a.frm)
        if moves != u.traj_len:
            problems.append(f"uav {u.uav_id}: length {u.traj_len} != {moves} executed moves")
        traj = report.trajectories.get(u.uav_id, [])
        if len(traj) != len(actions) + 1:
            problems.append(f"uav {u.uav_id}: trajectory and action log disagree")

        parts = u.energy_parts
        if abs(sum(parts.values()) - u.energy) > tol:
            problems.append(f"uav {u.uav_id}: energy parts do not sum to total")
        if abs((u.energy_start - u.energy_left) - u.energy) > 1e-6:
            problems.append(f"uav {u.uav_id}: energy drawn != energy accounted")
        if report.mode is Mode.G_LLM and parts.get("inference", 0.0) > 0:
            problems.append(f"uav {u.uav_id}: on-board inference charged in g-llm")

        for rec in report.records.get(u.uav_id, []):
            if min(rec.inference, rec.tool, rec.transfer, rec.waiting) < -tol:
                problems.append(f"uav {u.uav_id}: negative latency component at tick {rec.tick}")
        if report.mode is Mode.L_SLM and any(r.transfer or r.waiting for r in report.records.get(u.uav_id, [])):
            problems.append(f"uav {u.uav_id}: link latency charged in l-slm")

        if report.mode is Mode.SLM_LLM:
            k = report.sync_interval
            attempts = report.sync_attempts.get(u.uav_id, [])
            expected = list(range(k, u.decisions + 1, k))
            if attempts != expected[:len(attempts)] or len(expected) - len(attempts) > (0 if u.alive else 1):
                problems.append(f"uav {u.uav_id}: sync attempts {attempts[:5]}... off the K={k} cadence")

        for a in actions:
            # hovers draw energy too
            if a.energy_after < a.reserve_floor - tol:
                problems.append(f"uav {u.uav_id}: below reserve floor at tick {a.tick}")
            if a.to == a.frm:
                continue
            if a.to in a.no_fly:
                problems.append(f"uav {u.uav_id}: moved into no-fly {a.to} at tick {a.tick}")
            if a.to in obstacles:
                problems.append(f"uav {u.uav_id}: moved into obstacle {a.to} at tick {a.tick}")

    for r in report.receipts:
        if (r.caller == BS_ID) != (r.tier is Tier.GROUND):
            problems.append(f"tool {r.tool}: {r.tier.value} tool run by caller {r.caller}")
    return problems
