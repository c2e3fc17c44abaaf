"""
Short-Term Memory — bounded UAV-side buffer, semantic summaries, refresh directives
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import TYPE_CHECKING, Deque, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from codec import Reader, Writer
from config import STM_CAPACITY
from helpers import Cell, cell_order
from world import CellState

if TYPE_CHECKING:
    from world import UavState


class EntryKind(IntEnum):
    OBSERVATION = 0
    DECISION = 1
    FALLBACK = 2
    SYNC_MARKER = 3
    TOOL_INVOCATION = 4


@dataclass(frozen=True)
class MemoryEntry:
    """
    One compact record. Meaning of the generic fields per kind:

        Observation      deltas = revealed cells, cells = waypoints reached
        Decision         cells = (from, to), code = 1 move / 0 hover, value = latency
        Fallback         cells = (position, command), code = fallback reason
        SyncMarker       code = sync outcome, value = acknowledged round
        ToolInvocation   code = tier, value = latency cost
    """

    timestamp: float
    kind: EntryKind
    cells: Tuple[Cell, ...] = ()
    deltas: Tuple[Tuple[Cell, int], ...] = ()
    code: int = 0
    value: float = 0.0
    seq: int = 0

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .real(self.timestamp)
            .code(int(self.kind))
            .counter(self.seq)
            .code(self.code)
            .real(self.value)
            .cells(self.cells)
            .deltas(self.deltas)
            .getvalue()
        )

    @property
    def payload_bytes(self) -> int:
        return len(self.to_bytes())


class RefreshKind(IntEnum):
    NONE = 0
    CLEAR = 1
    TRUNCATE = 2


@dataclass(frozen=True)
class RefreshDirective:
    kind: RefreshKind = RefreshKind.NONE
    keep: int = 0

    @classmethod
    def none(cls) -> "RefreshDirective":
        return cls()

    @classmethod
    def clear(cls) -> "RefreshDirective":
        return cls(RefreshKind.CLEAR)

    @classmethod
    def truncate_to(cls, n: int) -> "RefreshDirective":
        if n < 0:
            raise ValueError("truncate size must be >= 0")
        return cls(RefreshKind.TRUNCATE, n)

    def write(self, w: Writer) -> Writer:
        return w.code(int(self.kind)).counter(self.keep)

    @classmethod
    def read(cls, r: Reader) -> "RefreshDirective":
        return cls(RefreshKind(r.code()), r.counter())


class ShortTermMemory:
    """FIFO of the most recent `capacity` entries; every entry gets a sequence number."""

    def __init__(self, capacity: int = STM_CAPACITY) -> None:
        if capacity <= 0:
            raise ValueError("memory capacity must be > 0")
        self.capacity = capacity
        self.entries: Deque[MemoryEntry] = deque(maxlen=capacity)
        self.last_synced_round = 0
        self.last_synced_seq = 0
        self.sync_round = 0
        self._next_seq = 1
        self._pending: Dict[int, int] = {}  # round -> highest seq it covered
        self._counted_seq = 0  # highest seq whose raw bytes were reported

    def __len__(self) -> int:
        return len(self.entries)

    def window(self) -> List[MemoryEntry]:
        return [e for e in self.entries if e.seq > self.last_synced_seq]

    def mark_synced(self, sync_round: int) -> None:
        """An acknowledged round moves the window start past everything it summarized."""
        covered = self._pending.pop(sync_round, None)
        if covered is None or sync_round <= self.last_synced_round:
            return
        self.last_synced_round = sync_round
        self.last_synced_seq = max(self.last_synced_seq, covered)
        for r in [r for r in self._pending if r < sync_round]:
            del self._pending[r]


def record(stm: ShortTermMemory, entry: MemoryEntry) -> MemoryEntry:
    """Append with the next sequence number; the deque evicts oldest-first."""
    stored = MemoryEntry(
        timestamp=entry.timestamp,
        kind=entry.kind,
        cells=entry.cells,
        deltas=entry.deltas,
        code=entry.code,
        value=entry.value,
        seq=stm._next_seq,
    )
    stm._next_seq += 1
    stm.entries.append(stored)
    return stored


def apply_refresh(stm: ShortTermMemory, directive: RefreshDirective) -> None:
    if directive.kind is RefreshKind.CLEAR:
        stm.entries.clear()
    elif directive.kind is RefreshKind.TRUNCATE:
        keep = list(stm.entries)[-directive.keep:] if directive.keep else []
        stm.entries.clear()
        stm.entries.extend(keep)


# ---------------------------------------------------------------------------
# Episode summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeSummary:
    """
    Digest of one unacknowledged window. The residual route travels as a bit
    mask over the route assigned in `route_round` (0 is the pre-flight brief);
    `resolve` rebuilds it on the receiving side.
    """

    uav_id: int
    sync_round: int
    timestamp: float = 0.0
    position: Optional[Cell] = None
    energy: float = 0.0
    obstacle_deltas: Tuple[Tuple[Cell, int], ...] = ()
    waypoints_completed: Tuple[Cell, ...] = ()
    route_round: int = 0
    residual_mask: Tuple[bool, ...] = ()
    residual_count: int = 0
    latency_mean: float = 0.0
    latency_max: float = 0.0
    fallback_count: int = 0
    decision_count: int = 0
    # local bookkeeping, not sent
    residual: Tuple[Cell, ...] = field(default=(), compare=False)
    raw_bytes: int = field(default=0, compare=False)
    new_raw_bytes: int = field(default=0, compare=False)

    @property
    def latency_stats(self) -> Tuple[float, float]:
        return (self.latency_mean, self.latency_max)

    def resolve(self, route: Sequence[Cell]) -> "EpisodeSummary":
        if len(route) != len(self.residual_mask):
            raise ValueError(
                f"UAV {self.uav_id}: mask of {len(self.residual_mask)} bits "
                f"against a route of {len(route)} waypoints"
            )
        residual = tuple(w for w, keep in zip(route, self.residual_mask) if keep)
        if len(residual) != self.residual_count:
            raise ValueError(f"UAV {self.uav_id}: residual count mismatch")
        return replace(self, residual=residual)

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .counter(self.uav_id)
            .counter(self.sync_round)
            .real(self.timestamp)
            .cell(self.position)
            .real(self.energy)
            .deltas(self.obstacle_deltas)
            .cells(self.waypoints_completed)
            .counter(self.route_round)
            .flags(self.residual_mask)
            .counter(self.residual_count)
            .real(self.latency_mean)
            .real(self.latency_max)
            .counter(self.fallback_count)
            .counter(self.decision_count)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EpisodeSummary":
        r = Reader(data)
        out = cls(
            uav_id=r.counter(),
            sync_round=r.counter(),
            timestamp=r.real(),
            position=r.cell(),
            energy=r.real(),
            obstacle_deltas=tuple(r.deltas()),
            waypoints_completed=tuple(r.cells()),
            route_round=r.counter(),
            residual_mask=tuple(r.flags()),
            residual_count=r.counter(),
            latency_mean=r.real(),
            latency_max=r.real(),
            fallback_count=r.counter(),
            decision_count=r.counter(),
        )
        r.done()
        return out

    @property
    def payload_bytes(self) -> int:
        return len(self.to_bytes())


def residual_mask(route: Sequence[Cell], residual: Sequence[Cell]) -> Tuple[bool, ...]:
    """Bits over `route` selecting `residual`, which must keep the route's order."""
    left = set(residual)
    mask = tuple(w in left for w in route)
    if [w for w, keep in zip(route, mask) if keep] != list(residual):
        raise ValueError("residual route is not an ordered subset of the assigned route")
    return mask


def summarize(stm: ShortTermMemory, bs_known: Set[Cell],
              uav: Optional["UavState"] = None, now: float = 0.0,
              route: Optional[Sequence[Cell]] = None, route_round: int = 0) -> EpisodeSummary:
    """
    Digest the unacknowledged window. Only obstacles the base station does not
    already know are sent; `uav`, when given, contributes position, energy and
    the residual mask over `route` (its own residual when no route is given).
    """
    window = stm.window()
    stm.sync_round += 1
    sync_round = stm.sync_round
    stm._pending[sync_round] = max((e.seq for e in window), default=stm.last_synced_seq)

    new_obstacles: dict = {}
    completed: List[Cell] = []
    latencies: List[float] = []
    fallbacks = 0
    decisions = 0
    for e in window:
        for cell, state in e.deltas:
            if state == CellState.OBSTACLE and cell not in bs_known:
                new_obstacles[cell] = state
        if e.kind is EntryKind.OBSERVATION:
            completed.extend(c for c in e.cells if c not in completed)
        elif e.kind is EntryKind.DECISION:
            latencies.append(e.value)
            decisions += 1
        elif e.kind is EntryKind.FALLBACK:
            fallbacks += 1

    residual: Tuple[Cell, ...] = ()
    mask: Tuple[bool, ...] = ()
    position, energy, uav_id = None, 0.0, 0
    if uav is not None:
        residual = tuple(uav.residual_waypoints)
        mask = residual_mask(residual if route is None else route, residual)
        position, energy, uav_id = uav.position, uav.energy, uav.id

    # entries already counted by an earlier, unacknowledged round are not new
    fresh = [e for e in window if e.seq > stm._counted_seq]
    stm._counted_seq = max([stm._counted_seq] + [e.seq for e in window])

    return EpisodeSummary(
        uav_id=uav_id,
        sync_round=sync_round,
        timestamp=float(now),
        position=position,
        energy=energy,
        obstacle_deltas=tuple(sorted(new_obstacles.items(), key=lambda kv: cell_order(kv[0]))),
        waypoints_completed=tuple(completed),
        route_round=route_round,
        residual_mask=mask,
        residual_count=len(residual),
        latency_mean=sum(latencies) / len(latencies) if latencies else 0.0,
        latency_max=max(latencies, default=0.0),
        fallback_count=fallbacks,
        decision_count=decisions,
        residual=residual,
        raw_bytes=raw_window_bytes(window),
        new_raw_bytes=raw_window_bytes(fresh),
    )


def raw_window_bytes(entries: Iterable[MemoryEntry]) -> int:
    return sum(e.payload_bytes for e in entries)
