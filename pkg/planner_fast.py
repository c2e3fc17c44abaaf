"""
Fast Planner — on-board weighted A*, D* Lite incremental replanning, greedy target pick

Unknown cells are planned through as Free. Edge cost is 1 for entering a
cell that is neither a known obstacle nor in the extra `blocked` set.
Equal priority keys break toward the lower (y, x) cell.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import (
    CONFIDENCE_THRESHOLD,
    ENERGY_RESERVE_FLOOR,
    HEURISTIC_WEIGHT,
    SYNC_INTERVAL,
)
from helpers import Cell, cell_order, manhattan, neighbors4
from world import CellState, ObservationDelta, UavState

INF = math.inf


class PlannerError(Exception):
    """Base class for planner failures."""


class NoPath(PlannerError):
    def __init__(self, start: Cell, goal: Cell) -> None:
        super().__init__(f"no path {start} -> {goal}")
        self.start = start
        self.goal = goal


class NoReachableWaypoint(PlannerError):
    pass


# ---------------------------------------------------------------------------
# Tunables carried by each UAV and rewritten by StrategyUpdate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlannerParams:
    heuristic_weight: float = HEURISTIC_WEIGHT
    replan_confidence_threshold: float = CONFIDENCE_THRESHOLD
    sync_interval: int = SYNC_INTERVAL

    def __post_init__(self) -> None:
        if self.heuristic_weight < 1.0:
            raise ValueError("heuristic_weight must be >= 1")
        if not 0.0 <= self.replan_confidence_threshold <= 1.0:
            raise ValueError("replan_confidence_threshold must lie in [0, 1]")
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")


@dataclass(frozen=True)
class ConstraintSet:
    no_fly_cells: FrozenSet[Cell] = frozenset()
    energy_reserve_floor: float = ENERGY_RESERVE_FLOOR

    def __post_init__(self) -> None:
        if self.energy_reserve_floor < 0:
            raise ValueError("energy_reserve_floor must be >= 0")


@dataclass(frozen=True)
class Path:
    cells: Tuple[Cell, ...]

    @property
    def cost(self) -> int:
        return len(self.cells) - 1

    @property
    def start(self) -> Cell:
        return self.cells[0]

    @property
    def goal(self) -> Cell:
        return self.cells[-1]

    def next_cell(self) -> Cell:
        return self.cells[1] if len(self.cells) > 1 else self.cells[0]

    def advance(self, position: Cell) -> Optional["Path"]:
        """Remaining path once the UAV sits at `position`; None if it left the path."""
        try:
            i = self.cells.index(position)
        except ValueError:
            return None
        return Path(self.cells[i:])

    def touches(self, cells: Iterable[Cell]) -> bool:
        on_path = set(self.cells)
        return any(c in on_path for c in cells)


def _occupancy(grid) -> List[List[int]]:
    """Row-major occupancy (1 = obstacle) from a LocalMapCache or GridMap."""
    arr = grid.states if hasattr(grid, "states") else grid.cells
    return (np.asarray(arr) == CellState.OBSTACLE).astype(np.int8).tolist()


# ---------------------------------------------------------------------------
# Weighted A*
# ---------------------------------------------------------------------------


def astar(grid, start: Cell, goal: Cell, heuristic_weight: float = 1.0,
          blocked: Iterable[Cell] = ()) -> Path:
    """
    Grid A* with f = g + w·Manhattan. w = 1 is optimal; w > 1 stays within
    w × optimal (closed list, no re-expansion).
    """
    if heuristic_weight < 1.0:
        raise ValueError("heuristic_weight must be >= 1")
    occ = _occupancy(grid)
    height, width = len(occ), len(occ[0])
    for c in (start, goal):
        if not (0 <= c[0] < width and 0 <= c[1] < height):
            raise ValueError(f"{c} outside {width}x{height} map")
    extra: Set[Cell] = set(blocked)
    if occ[start[1]][start[0]]:
        raise ValueError(f"start {start} is a known obstacle")
    if start == goal:
        return Path((start,))
    if occ[goal[1]][goal[0]] or goal in extra:
        raise NoPath(start, goal)

    gx, gy = goal
    g: Dict[Cell, int] = {start: 0}
    parent: Dict[Cell, Cell] = {}
    closed: Set[Cell] = set()
    h0 = heuristic_weight * (abs(start[0] - gx) + abs(start[1] - gy))
    heap: List[Tuple[float, int, int]] = [(h0, start[1], start[0])]

    while heap:
        _, y, x = heapq.heappop(heap)
        cur = (x, y)
        if cur in closed:
            continue
        if cur == goal:
            break
        closed.add(cur)
        gc = g[cur] + 1
        for nb in neighbors4(cur, width, height):
            if nb in closed or occ[nb[1]][nb[0]] or nb in extra:
                continue
            if gc < g.get(nb, INF):
                g[nb] = gc
                parent[nb] = cur
                f = gc + heuristic_weight * (abs(nb[0] - gx) + abs(nb[1] - gy))
                heapq.heappush(heap, (f, nb[1], nb[0]))
    else:
        raise NoPath(start, goal)

    cells = [goal]
    while cells[-1] != start:
        cells.append(parent[cells[-1]])
    cells.reverse()
    return Path(tuple(cells))


# ---------------------------------------------------------------------------
# D* Lite
# ---------------------------------------------------------------------------


class DStarPlanner:
    """
    D* Lite searching backwards from the goal. `blocked` is the set of cells
    the planner currently believes cannot be entered.
    """

    def __init__(self, goal: Cell, width: int, height: int,
                 blocked: Iterable[Cell] = ()) -> None:
        self.goal = goal
        self.width = width
        self.height = height
        self.blocked: Set[Cell] = set(blocked)
        self.k_m = 0.0
        self.g: Dict[Cell, float] = {}
        self.rhs: Dict[Cell, float] = {goal: 0.0}
        self.start: Optional[Cell] = None
        self.last: Optional[Cell] = None
        self._heap: List[Tuple[float, float, int, int]] = []
        self._open: Dict[Cell, Tuple[float, float]] = {}
        self.expansions = 0

    @classmethod
    def for_map(cls, grid, goal: Cell, extra_blocked: Iterable[Cell] = ()) -> "DStarPlanner":
        known = grid.known_obstacles() if hasattr(grid, "known_obstacles") else grid.obstacles()
        return cls(goal, grid.width, grid.height, set(known) | set(extra_blocked))

    # -- bookkeeping ------------------------------------------------------

    def _h(self, a: Cell, b: Cell) -> float:
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    def _key(self, s: Cell) -> Tuple[float, float]:
        m = min(self.g.get(s, INF), self.rhs.get(s, INF))
        return (m + self._h(self.start, s) + self.k_m, m)

    def _push(self, s: Cell, key: Tuple[float, float]) -> None:
        self._open[s] = key
        heapq.heappush(self._heap, (key[0], key[1], s[1], s[0]))

    def _top(self) -> Optional[Tuple[Tuple[float, float], Cell]]:
        while self._heap:
            k1, k2, y, x = self._heap[0]
            s = (x, y)
            if self._open.get(s) == (k1, k2):
                return (k1, k2), s
            heapq.heappop(self._heap)
        return None

    def _cost(self, v: Cell) -> float:
        return INF if v in self.blocked else 1.0

    def _best_successor_value(self, u: Cell) -> float:
        best = INF
        for s in neighbors4(u, self.width, self.height):
            val = self._cost(s) + self.g.get(s, INF)
            if val < best:
                best = val
        return best

    def _update_vertex(self, u: Cell) -> None:
        if u != self.goal:
            self.rhs[u] = self._best_successor_value(u)
        if self.g.get(u, INF) != self.rhs.get(u, INF):
            self._push(u, self._key(u))
        else:
            self._open.pop(u, None)

    def _compute_shortest_path(self, target: Optional[Cell] = None) -> None:
        """Expand until `target` (default: the start) is consistent and no queued key is below its own."""
        target = self.start if target is None else target
        while True:
            top = self._top()
            if top is None:
                break
            k_old, u = top
            g_t, rhs_t = self.g.get(target, INF), self.rhs.get(target, INF)
            if not (k_old < self._key(target) or rhs_t != g_t):
                break
            k_new = self._key(u)
            if k_old < k_new:
                self._push(u, k_new)
                continue
            heapq.heappop(self._heap)
            self._open.pop(u, None)
            self.expansions += 1
            g_u, rhs_u = self.g.get(u, INF), self.rhs.get(u, INF)
            if g_u > rhs_u:
                self.g[u] = rhs_u
                for p in neighbors4(u, self.width, self.height):
                    self._update_vertex(p)
            else:
                self.g[u] = INF
                self._update_vertex(u)
                for p in neighbors4(u, self.width, self.height):
                    self._update_vertex(p)

    # -- public -----------------------------------------------------------

    def initialize(self, start: Cell) -> None:
        self.start = start
        self.last = start
        self._push(self.goal, self._key(self.goal))

    def set_blocked(self, cells: Iterable[Cell], blocked: bool) -> List[Cell]:
        changed = []
        for c in cells:
            if blocked and c not in self.blocked:
                self.blocked.add(c)
                changed.append(c)
            elif not blocked and c in self.blocked:
                self.blocked.discard(c)
                changed.append(c)
        for c in changed:
            for p in neighbors4(c, self.width, self.height):
                self._update_vertex(p)
        return changed

    def move_to(self, current: Cell) -> None:
        if self.start is None:
            self.initialize(current)
            return
        if current != self.last:
            self.k_m += self._h(self.last, current)
            self.last = current
        self.start = current

    def extract_path(self) -> Path:
        """
        Walk from the start settling each cell before stepping off it, so every
        step reads a consistent rhs; ties break by (y, x).
        """
        start, goal = self.start, self.goal
        if goal in self.blocked:
            raise NoPath(start, goal)
        cells = [start]
        cur = start
        limit = self.width * self.height
        while cur != goal:
            self._compute_shortest_path(cur)
            here = self.rhs.get(cur, INF)
            if here == INF or len(cells) > limit:
                raise NoPath(start, goal)
            steps = [s for s in neighbors4(cur, self.width, self.height)
                     if self._cost(s) + self.g.get(s, INF) == here]
            if not steps:
                raise NoPath(start, goal)
            cur = min(steps, key=cell_order)
            cells.append(cur)
        return Path(tuple(cells))


def dstar_replan(planner: DStarPlanner, grid, current: Cell,
                 deltas: Optional[ObservationDelta] = None,
                 extra_blocked: Iterable[Cell] = ()) -> Path:
    """
    Repair the plan after the UAV moved to `current` and `deltas` were applied
    to `grid`. Cost equals a fresh A* (w = 1) on the same map.
    """
    planner.move_to(current)
    extra = set(extra_blocked)
    if deltas is not None:
        newly_blocked, newly_free = [], []
        for cell, _ in deltas.revealed:
            should_block = grid.is_known_obstacle(cell) or cell in extra
            if should_block and cell not in planner.blocked:
                newly_blocked.append(cell)
            elif not should_block and cell in planner.blocked:
                newly_free.append(cell)
        planner.set_blocked(newly_blocked, True)
        planner.set_blocked(newly_free, False)
    planner._compute_shortest_path()
    return planner.extract_path()


# ---------------------------------------------------------------------------
# Greedy target selection
# ---------------------------------------------------------------------------


def next_waypoint_greedy(state: UavState, blocked: Iterable[Cell] = ()) -> Cell:
    """Residual waypoint with the cheapest known-map A* path; ties to lower (y, x)."""
    if not state.residual_waypoints:
        raise NoReachableWaypoint(f"UAV {state.id} has no residual waypoints")
    blocked = frozenset(blocked)
    best: Optional[Tuple[int, Tuple[int, int], Cell]] = None
    for wp in state.residual_waypoints:
        try:
            cost = astar(state.local_map, state.position, wp, 1.0, blocked).cost
        except NoPath:
            continue
        key = (cost, cell_order(wp), wp)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoReachableWaypoint(
            f"UAV {state.id}: none of {len(state.residual_waypoints)} waypoints reachable"
        )
    return best[2]


def confidence(position: Cell, goal: Cell, path: Path) -> float:
    """Manhattan lower bound over planned cost; 1.0 for a zero-length plan."""
    if path.cost == 0:
        return 1.0
    return manhattan(position, goal) / path.cost
