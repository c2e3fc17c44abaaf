"""
Air–Ground Link — two-state availability, serialization delay, byte accounting
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Protocol, Tuple

import numpy as np

from config import (
    BS_ID,
    LINK_BANDWIDTH,
    LINK_P_DOWN,
    LINK_P_UP,
    LINK_RTT,
    QUEUE_CAPACITY,
    logger,
)


class LinkError(Exception):
    """Base class for link failures."""


class QueueOverflow(LinkError):
    """Queue over capacity: the oldest message was dropped to admit the new one."""

    def __init__(self, dropped: "Message", outcome: "DeliveryOutcome") -> None:
        super().__init__(
            f"link congested: dropped {dropped.kind.value} from {dropped.sender}"
        )
        self.dropped = dropped
        self.outcome = outcome


class Payload(Protocol):
    def to_bytes(self) -> bytes: ...


class MessageKind(str, Enum):
    SEMANTIC_SUMMARY = "SemanticSummary"
    STRATEGY_UPDATE = "StrategyUpdate"
    FULL_STATE = "FullState"
    COMMAND = "Command"
    COLLAB_REQUEST = "CollabRequest"


class DeliveryStatus(str, Enum):
    DELIVERED = "Delivered"
    QUEUED = "Queued"
    DROPPED = "Dropped"


@dataclass(frozen=True)
class Blob:
    """Opaque body; its canonical bytes are the bytes themselves."""

    data: bytes = b""

    def to_bytes(self) -> bytes:
        return self.data


@dataclass(frozen=True)
class LinkParams:
    p_down: float = LINK_P_DOWN
    p_up: float = LINK_P_UP
    bandwidth: float = LINK_BANDWIDTH
    rtt: float = LINK_RTT
    queue_capacity: int = QUEUE_CAPACITY
    # scripted outage [from_tick, until_tick); until None = rest of run
    outage_from: Optional[int] = None
    outage_until: Optional[int] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_down <= 1.0 and 0.0 <= self.p_up <= 1.0):
            raise ValueError("link probabilities must lie in [0, 1]")
        if self.bandwidth <= 0:
            raise ValueError("link.bandwidth must be > 0")
        if self.rtt < 0:
            raise ValueError("link.rtt must be >= 0")
        if self.queue_capacity < 1:
            raise ValueError("link.queue_capacity must be >= 1")

    def in_outage(self, tick: int) -> bool:
        if self.outage_from is None or tick < self.outage_from:
            return False
        return self.outage_until is None or tick < self.outage_until


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    body: Payload
    sender: int
    receiver: int
    created_at: float
    payload_bytes: int

    @classmethod
    def wrap(cls, kind: MessageKind, body: Payload, sender: int,
             receiver: int, created_at: float) -> "Message":
        return cls(kind=kind, body=body, sender=sender, receiver=receiver,
                   created_at=created_at, payload_bytes=len(body.to_bytes()))

    @property
    def is_uplink(self) -> bool:
        return self.receiver == BS_ID


@dataclass(frozen=True)
class DeliveryOutcome:
    status: DeliveryStatus
    at: Optional[float] = None

    @property
    def delivered(self) -> bool:
        return self.status is DeliveryStatus.DELIVERED


@dataclass
class LinkState:
    up: bool = True
    tick: int = 0
    uplink_queue: Deque[Message] = field(default_factory=deque)
    downlink_queue: Deque[Message] = field(default_factory=deque)
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    delivered: List[Tuple[Message, float]] = field(default_factory=list)
    dropped: List[Message] = field(default_factory=list)
    trace: List[bool] = field(default_factory=list)
    _per_node: Dict[int, List[int]] = field(default_factory=dict)

    def bytes_for(self, uav_id: int) -> Tuple[int, int]:
        """(uplink bytes sent by, downlink bytes received by) one UAV."""
        up, down = self._per_node.get(uav_id, (0, 0))
        return up, down

    def queued(self) -> int:
        return len(self.uplink_queue) + len(self.downlink_queue)

    def _account(self, msg: Message, at: float) -> None:
        if msg.is_uplink:
            self.uplink_bytes += msg.payload_bytes
            self._per_node.setdefault(msg.sender, [0, 0])[0] += msg.payload_bytes
        else:
            self.downlink_bytes += msg.payload_bytes
            self._per_node.setdefault(msg.receiver, [0, 0])[1] += msg.payload_bytes
        self.delivered.append((msg, at))


def step_link(state: LinkState, params: LinkParams,
              rng: np.random.Generator) -> LinkState:
    """Advance one tick: exactly one draw from `rng`, even under a scripted outage."""
    draw = rng.random()
    if state.up:
        state.up = not draw < params.p_down
    else:
        state.up = draw < params.p_up
    state.tick += 1
    if params.in_outage(state.tick):
        state.up = False
    state.trace.append(state.up)
    return state


def transfer_time(params: LinkParams, payload_bytes: int) -> float:
    if payload_bytes < 0:
        raise ValueError("payload_bytes must be >= 0")
    return params.rtt / 2.0 + payload_bytes / params.bandwidth


def transmit(link: LinkState, params: LinkParams, msg: Message,
             now: float) -> DeliveryOutcome:
    if link.up:
        at = now + transfer_time(params, msg.payload_bytes)
        link._account(msg, at)
        return DeliveryOutcome(DeliveryStatus.DELIVERED, at)

    queue = link.uplink_queue if msg.is_uplink else link.downlink_queue
    queue.append(msg)
    outcome = DeliveryOutcome(DeliveryStatus.QUEUED)
    if len(queue) > params.queue_capacity:
        oldest = queue.popleft()
        link.dropped.append(oldest)
        logger.warning("⚠ Link congested, dropped %s from %s",
                       oldest.kind.value, oldest.sender)
        raise QueueOverflow(oldest, outcome)
    return outcome


def drain(link: LinkState, params: LinkParams,
          now: float) -> List[Tuple[Message, DeliveryOutcome]]:
    """Deliver everything held while the link was Down. FIFO per direction."""
    if not link.up:
        return []
    out: List[Tuple[Message, DeliveryOutcome]] = []
    for queue in (link.uplink_queue, link.downlink_queue):
        while queue:
            msg = queue.popleft()
            at = now + transfer_time(params, msg.payload_bytes)
            link._account(msg, at)
            out.append((msg, DeliveryOutcome(DeliveryStatus.DELIVERED, at)))
    return out


class Channel:
    """The shared air–ground link: parameters, state and the overflow tally."""

    def __init__(self, params: LinkParams, state: Optional[LinkState] = None) -> None:
        self.params = params
        self.state = state if state is not None else LinkState()
        self.overflows = 0

    @property
    def up(self) -> bool:
        return self.state.up

    def step(self, rng: np.random.Generator) -> bool:
        step_link(self.state, self.params, rng)
        return self.state.up

    def send(self, msg: Message, now: float) -> DeliveryOutcome:
        """Like `transmit`, but a congestion drop is counted instead of raised."""
        try:
            return transmit(self.state, self.params, msg, now)
        except QueueOverflow as exc:
            self.overflows += 1
            return exc.outcome

    def drain(self, now: float) -> List[Tuple[Message, DeliveryOutcome]]:
        return drain(self.state, self.params, now)

    def transfer_time(self, payload_bytes: int) -> float:
        return transfer_time(self.params, payload_bytes)
