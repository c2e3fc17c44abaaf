"""
Toolkit — tiered tool registry with capability-tag index and Top-K retrieval
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set

from config import BS_ID, DEFAULT_TOOLS, logger

if TYPE_CHECKING:
    from world import UavState


class ToolError(Exception):
    """Base class for toolkit failures."""


class DuplicateName(ToolError):
    pass


class InsufficientEnergy(ToolError):
    def __init__(self, tool: str, energy: float, floor: float) -> None:
        super().__init__(f"{tool} needs {floor:.3f} J available, UAV has {energy:.3f} J")
        self.tool = tool
        self.energy = energy
        self.floor = floor


class TierViolation(ToolError):
    pass


class Tier(str, Enum):
    ONBOARD = "onboard"
    GROUND = "ground"


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    tier: Tier
    tags: FrozenSet[str]
    latency_cost: float = 0.0
    energy_cost: float = 0.0
    resource_floor: float = 0.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("tool name must be non-empty")
        if min(self.latency_cost, self.energy_cost, self.resource_floor) < 0:
            raise ValueError(f"tool {self.name}: costs must be >= 0")
        object.__setattr__(self, "tier", Tier(self.tier))
        object.__setattr__(self, "tags", frozenset(self.tags))

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ToolDescriptor":
        return cls(
            name=str(raw["name"]),
            tier=Tier(raw["tier"]),
            tags=frozenset(raw.get("tags", ())),
            latency_cost=float(raw.get("latency_cost", 0.0)),
            energy_cost=float(raw.get("energy_cost", 0.0)),
            resource_floor=float(raw.get("resource_floor", 0.0)),
        )

    def rank_key(self):
        return (self.latency_cost, self.energy_cost, self.name)


@dataclass(frozen=True)
class ToolQuery:
    required_tags: FrozenSet[str] = frozenset()
    tier: Optional[Tier] = None  # None = any tier
    available_energy: float = math.inf
    k: int = 1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("ToolQuery.k must be >= 1")
        object.__setattr__(self, "required_tags", frozenset(self.required_tags))

    def admits(self, tool: ToolDescriptor) -> bool:
        return (
            self.required_tags <= tool.tags
            and (self.tier is None or tool.tier is self.tier)
            and tool.resource_floor <= self.available_energy
        )


@dataclass(frozen=True)
class InvocationReceipt:
    tool: str
    tier: Tier
    caller: int
    latency_cost: float
    energy_cost: float


class ToolRegistry:
    """Tools by name, plus a tag -> names index used to narrow Top-K candidates."""

    def __init__(self, descriptors: Iterable[ToolDescriptor] = ()) -> None:
        self._tools: Dict[str, ToolDescriptor] = {}
        self._tags: Dict[str, Set[str]] = defaultdict(set)
        for d in descriptors:
            register(self, d)

    def __len__(self) -> int:
        return len(self._tools)

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def get(self, name: str) -> Optional[ToolDescriptor]:
        return self._tools.get(name)

    def tools(self) -> List[ToolDescriptor]:
        return list(self._tools.values())

    def tag_counts(self) -> Dict[str, int]:
        return {tag: len(names) for tag, names in self._tags.items()}

    def names_with(self, tag: str) -> Set[str]:
        return set(self._tags.get(tag, ()))

    @classmethod
    def from_config(cls, roster: Optional[Iterable[Mapping[str, Any]]] = None) -> "ToolRegistry":
        """`None` means the default roster; an empty list means no tools."""
        raw = DEFAULT_TOOLS if roster is None else roster
        return cls(ToolDescriptor.from_dict(r) for r in raw)


def register(registry: ToolRegistry, descriptor: ToolDescriptor) -> None:
    if descriptor.name in registry._tools:
        raise DuplicateName(f"tool {descriptor.name!r} already registered")
    registry._tools[descriptor.name] = descriptor
    for tag in descriptor.tags:
        registry._tags[tag].add(descriptor.name)


def select_topk(registry: ToolRegistry, query: ToolQuery) -> List[ToolDescriptor]:
    if query.required_tags:
        buckets = sorted((registry._tags.get(t, set()) for t in query.required_tags), key=len)
        names = set(buckets[0]).intersection(*buckets[1:])
        candidates = [registry._tools[n] for n in names]
    else:
        candidates = registry.tools()
    matched = [t for t in candidates if query.admits(t)]
    matched.sort(key=ToolDescriptor.rank_key)
    return matched[: query.k]


def exhaustive_scan(registry: ToolRegistry, query: ToolQuery) -> List[ToolDescriptor]:
    """Filter-then-sort over every tool; no index."""
    return sorted((t for t in registry.tools() if query.admits(t)),
                  key=ToolDescriptor.rank_key)[: query.k]


def invoke(tool: ToolDescriptor, uav: Optional["UavState"] = None) -> InvocationReceipt:
    """
    Charge one invocation. With a UAV caller the tool must be on-board and the
    UAV must hold at least `resource_floor`; its energy is debited in place.
    Without a caller the base station pays (ground tier only).
    """
    if uav is None:
        if tool.tier is not Tier.GROUND:
            raise TierViolation(f"base station cannot run on-board tool {tool.name}")
        return InvocationReceipt(tool.name, tool.tier, BS_ID, tool.latency_cost, tool.energy_cost)

    if tool.tier is not Tier.ONBOARD:
        raise TierViolation(f"UAV {uav.id} cannot run ground tool {tool.name}")
    if uav.energy < tool.resource_floor or uav.energy < tool.energy_cost:
        logger.debug("UAV %d: %s refused at %.3f J", uav.id, tool.name, uav.energy)
        raise InsufficientEnergy(tool.name, uav.energy, max(tool.resource_floor, tool.energy_cost))
    uav.energy -= tool.energy_cost
    return InvocationReceipt(tool.name, tool.tier, uav.id, tool.latency_cost, tool.energy_cost)


@dataclass
class ToolLedger:
    """Running totals of receipts for one caller."""

    receipts: List[InvocationReceipt] = field(default_factory=list)

    def add(self, receipt: InvocationReceipt) -> InvocationReceipt:
        self.receipts.append(receipt)
        return receipt

    @property
    def latency(self) -> float:
        return sum(r.latency_cost for r in self.receipts)

    @property
    def energy(self) -> float:
        return sum(r.energy_cost for r in self.receipts)
