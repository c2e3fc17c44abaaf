"""
World — occupancy grid, UAV kinematics/energy, radius-limited sensing
"""

from __future__ import annotations

import dataclasses
import hashlib
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import TYPE_CHECKING, Dict, Iterable, List, Set, Tuple

import numpy as np

from config import COST_DEFAULTS, logger
from helpers import Cell, cell_order, is_adjacent_or_same, manhattan, neighbors4

if TYPE_CHECKING:
    from planner_fast import PlannerParams


class CellState(IntEnum):
    UNKNOWN = -1
    FREE = 0
    OBSTACLE = 1


class WorldError(Exception):
    """Base class for world-model failures."""


class IllegalMove(WorldError):
    pass


class EnergyExhausted(WorldError):
    def __init__(self, uav_id: int, energy: float, required: float) -> None:
        super().__init__(
            f"UAV {uav_id} needs {required:.3f} J but has {energy:.3f} J"
        )
        self.uav_id = uav_id
        self.energy = energy
        self.required = required


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridMap:
    """True occupancy grid, indexed cells[y, x]."""

    cells: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.cells, dtype=np.int8)
        if arr.ndim != 2 or arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("GridMap needs a non-empty 2-D array")
        if not np.isin(arr, (CellState.FREE, CellState.OBSTACLE)).all():
            raise ValueError("GridMap cells must be Free or Obstacle")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "cells", arr)

    @classmethod
    def empty(cls, width: int, height: int) -> "GridMap":
        return cls(np.zeros((height, width), dtype=np.int8))

    @classmethod
    def from_obstacles(cls, width: int, height: int,
                       obstacles: Iterable[Cell]) -> "GridMap":
        arr = np.zeros((height, width), dtype=np.int8)
        for x, y in obstacles:
            arr[y, x] = CellState.OBSTACLE
        return cls(arr)

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1(self.cells.tobytes())
        digest.update(f"{self.width}x{self.height}".encode())
        return digest.hexdigest()

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def state(self, cell: Cell) -> CellState:
        return CellState(int(self.cells[cell[1], cell[0]]))

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.cells[cell[1], cell[0]] == CellState.FREE

    def obstacles(self) -> Set[Cell]:
        ys, xs = np.nonzero(self.cells == CellState.OBSTACLE)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    def with_blocked(self, blocked: Iterable[Cell]) -> "GridMap":
        """Copy with extra cells marked Obstacle (no-fly zones for routing)."""
        blocked = list(blocked)
        if not blocked:
            return self
        arr = self.cells.copy()
        for x, y in blocked:
            if self.in_bounds((x, y)):
                arr[y, x] = CellState.OBSTACLE
        return GridMap(arr)

    def component(self, source: Cell) -> Set[Cell]:
        """Free cells 4-connected to `source`."""
        if not self.is_free(source):
            return set()
        seen = {source}
        queue = deque([source])
        while queue:
            cur = queue.popleft()
            for nxt in neighbors4(cur, self.width, self.height):
                if nxt not in seen and self.cells[nxt[1], nxt[0]] == CellState.FREE:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen


# ---------------------------------------------------------------------------
# Local knowledge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationDelta:
    revealed: Tuple[Tuple[Cell, int], ...]
    timestamp: float

    def obstacles(self) -> List[Cell]:
        return [c for c, s in self.revealed if s == CellState.OBSTACLE]


class LocalMapCache:
    """A UAV's partial copy of the grid: Free / Obstacle / Unknown per cell."""

    def __init__(self, width: int, height: int) -> None:
        self.width = width
        self.height = height
        self.states = np.full((height, width), CellState.UNKNOWN, dtype=np.int8)
        self.observed_at = np.full((height, width), np.nan, dtype=np.float64)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def copy(self) -> "LocalMapCache":
        out = LocalMapCache(self.width, self.height)
        out.states[:] = self.states
        out.observed_at[:] = self.observed_at
        return out

    def state(self, cell: Cell) -> CellState:
        return CellState(int(self.states[cell[1], cell[0]]))

    def is_known_obstacle(self, cell: Cell) -> bool:
        return self.states[cell[1], cell[0]] == CellState.OBSTACLE

    def is_unknown(self, cell: Cell) -> bool:
        return self.states[cell[1], cell[0]] == CellState.UNKNOWN

    def known_count(self) -> int:
        return int(np.count_nonzero(self.states != CellState.UNKNOWN))

    def known_obstacles(self) -> Set[Cell]:
        ys, xs = np.nonzero(self.states == CellState.OBSTACLE)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    def apply(self, delta: ObservationDelta) -> List[Cell]:
        """Write a delta in; returns the cells whose state changed."""
        changed: List[Cell] = []
        for (x, y), st in delta.revealed:
            if self.states[y, x] != st:
                self.states[y, x] = st
                changed.append((x, y))
            self.observed_at[y, x] = delta.timestamp
        return changed


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    t_slm: float = COST_DEFAULTS["t_slm"]
    t_llm: float = COST_DEFAULTS["t_llm"]
    e_slm: float = COST_DEFAULTS["e_slm"]
    e_llm: float = COST_DEFAULTS["e_llm"]
    e_flight: float = COST_DEFAULTS["e_flight"]
    e_hover: float = COST_DEFAULTS["e_hover"]
    e_tx: float = COST_DEFAULTS["e_tx"]

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"costs.{f.name} must be >= 0")
        if not self.t_slm < self.t_llm:
            raise ValueError("costs.t_slm must be smaller than costs.t_llm")
        if not self.e_slm < self.e_llm:
            raise ValueError("costs.e_slm must be smaller than costs.e_llm")


# ---------------------------------------------------------------------------
# UAV state
# ---------------------------------------------------------------------------


@dataclass
class UavState:
    id: int
    position: Cell
    energy: float
    residual_waypoints: List[Cell]
    local_map: LocalMapCache
    planner_params: "PlannerParams"
    decision_count: int = 0
    trajectory_length: int = 0
    completed: List[Cell] = field(default_factory=list)


def observe(world, uav: UavState, sensor_radius: int,
            now: float = 0.0) -> ObservationDelta:
    """
    Reveal every cell within Chebyshev radius of the UAV, with its true state.
    `world` is a Scenario or a bare GridMap.
    """
    grid: GridMap = getattr(world, "grid", world)
    if sensor_radius < 0:
        raise ValueError("sensor_radius must be >= 0")
    x0, y0 = uav.position
    lo_x, hi_x = max(0, x0 - sensor_radius), min(grid.width - 1, x0 + sensor_radius)
    lo_y, hi_y = max(0, y0 - sensor_radius), min(grid.height - 1, y0 + sensor_radius)
    block = grid.cells[lo_y:hi_y + 1, lo_x:hi_x + 1]
    revealed = tuple(
        ((x, y), int(block[y - lo_y, x - lo_x]))
        for y in range(lo_y, hi_y + 1)
        for x in range(lo_x, hi_x + 1)
    )
    return ObservationDelta(revealed=revealed, timestamp=float(now))


def move_cost(uav_position: Cell, next_cell: Cell, cost_model: CostModel) -> Tuple[int, float]:
    step = 0 if next_cell == uav_position else 1
    energy = cost_model.e_flight * step if step else cost_model.e_hover
    return step, energy


def apply_move(uav: UavState, next_cell: Cell, cost_model: CostModel) -> UavState:
    """One 4-connected step (or hover). Energy and trajectory length are charged here."""
    if not is_adjacent_or_same(uav.position, next_cell):
        raise IllegalMove(f"UAV {uav.id}: {uav.position} -> {next_cell} is not a 4-step")
    step, energy = move_cost(uav.position, next_cell, cost_model)
    if uav.energy - energy < 0:
        raise EnergyExhausted(uav.id, uav.energy, energy)
    return dataclasses.replace(
        uav,
        position=next_cell,
        energy=uav.energy - energy,
        trajectory_length=uav.trajectory_length + step,
    )


def nearest_start_partition(starts: List[Cell], waypoints: List[Cell]) -> Dict[int, List[Cell]]:
    """
    Pre-flight brief: each waypoint goes to the UAV with the nearest start
    (Manhattan), ties to the lower UAV index. Order inside a list is (y, x).
    """
    out: Dict[int, List[Cell]] = {i: [] for i in range(len(starts))}
    for wp in sorted(waypoints, key=cell_order):
        best = min(
            range(len(starts)),
            key=lambda i: (manhattan(starts[i], wp), i),
        )
        out[best].append(wp)
    logger.debug("Pre-flight brief: %s", {k: len(v) for k, v in out.items()})
    return out
