"""
Global Planner — GA waypoint assignment, nearest-neighbour baseline, exhaustive oracle

Runs at the base station on the full map. Distances come from BFS fields on
the 4-connected grid (identical to A* with w = 1 on unit costs), cached per
(map fingerprint, source cell).
"""

from __future__ import annotations

import itertools
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    BRUTE_FORCE_MAX_UAVS,
    BRUTE_FORCE_MAX_WAYPOINTS,
    DISTANCE_CACHE_SIZE,
    GA_CROSSOVER_RATE,
    GA_ELITISM,
    GA_GENERATIONS,
    GA_MUTATION_RATE,
    GA_POPULATION,
    GA_TOURNAMENT,
    logger,
)
from helpers import Cell, cell_order
from world import CellState, GridMap


class GlobalPlanError(Exception):
    """Base class for base-station planning failures."""


class Unreachable(GlobalPlanError):
    def __init__(self, waypoint: Cell) -> None:
        super().__init__(f"waypoint {waypoint} unreachable")
        self.waypoint = waypoint


class Infeasible(GlobalPlanError):
    pass


class TooLarge(GlobalPlanError):
    pass


class PartitionViolation(GlobalPlanError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    """routes[i] is the ordered visit list of the i-th UAV passed to the planner."""

    routes: Tuple[Tuple[Cell, ...], ...]
    objective: int

    def slice_for(self, index: int) -> List[Cell]:
        return list(self.routes[index])

    def owner_of(self, waypoint: Cell) -> Optional[int]:
        for i, route in enumerate(self.routes):
            if waypoint in route:
                return i
        return None


@dataclass(frozen=True)
class GaParams:
    population: int = GA_POPULATION
    generations: int = GA_GENERATIONS
    crossover_rate: float = GA_CROSSOVER_RATE
    mutation_rate: float = GA_MUTATION_RATE
    elitism: int = GA_ELITISM
    seed: int = 0
    tournament: int = GA_TOURNAMENT

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError("ga.population must be >= 2")
        if self.generations < 1:
            raise ValueError("ga.generations must be >= 1")
        if not (0.0 <= self.crossover_rate <= 1.0 and 0.0 <= self.mutation_rate <= 1.0):
            raise ValueError("ga rates must lie in [0, 1]")
        if self.elitism < 0 or self.elitism >= self.population:
            raise ValueError("ga.elitism must satisfy 0 <= elitism < population")
        if self.tournament < 1:
            raise ValueError("ga.tournament must be >= 1")


@dataclass
class GaRun:
    assignment: Assignment
    history: List[int] = field(default_factory=list)  # best objective per generation
    evaluations: int = 0


# ---------------------------------------------------------------------------
# Distance fields
# ---------------------------------------------------------------------------

_FIELDS: "OrderedDict[Tuple[str, Cell], np.ndarray]" = OrderedDict()


def clear_distance_cache() -> None:
    _FIELDS.clear()


def distance_field(grid: GridMap, source: Cell) -> np.ndarray:
    """BFS hop counts from `source` over Free cells, indexed [y, x]; -1 = unreachable."""
    key = (grid.fingerprint, source)
    cached = _FIELDS.get(key)
    if cached is not None:
        _FIELDS.move_to_end(key)
        return cached

    width, height = grid.width, grid.height
    dist = np.full((height, width), -1, dtype=np.int32)
    if grid.is_free(source):
        occ = (grid.cells == CellState.OBSTACLE).tolist()
        rows = [[-1] * width for _ in range(height)]
        sx, sy = source
        rows[sy][sx] = 0
        queue = deque([source])
        while queue:
            x, y = queue.popleft()
            d = rows[y][x] + 1
            for nx, ny in ((x, y - 1), (x - 1, y), (x + 1, y), (x, y + 1)):
                if 0 <= nx < width and 0 <= ny < height and rows[ny][nx] < 0 and not occ[ny][nx]:
                    rows[ny][nx] = d
                    queue.append((nx, ny))
        dist = np.asarray(rows, dtype=np.int32)
    dist.setflags(write=False)

    _FIELDS[key] = dist
    if len(_FIELDS) > DISTANCE_CACHE_SIZE:
        _FIELDS.popitem(last=False)
    return dist


def shortest_distance(grid: GridMap, a: Cell, b: Cell) -> int:
    d = int(distance_field(grid, a)[b[1], b[0]])
    if d < 0:
        raise Unreachable(b)
    return d


class DistanceTable:
    """Hop distances from every start and waypoint to every waypoint."""

    def __init__(self, grid: GridMap, starts: Sequence[Cell], waypoints: Sequence[Cell]) -> None:
        self.starts = list(starts)
        self.waypoints = list(waypoints)
        n = len(self.waypoints)
        xs = np.array([w[0] for w in self.waypoints], dtype=np.intp)
        ys = np.array([w[1] for w in self.waypoints], dtype=np.intp)
        sources = self.starts + self.waypoints
        table = np.zeros((len(sources), n), dtype=np.int64)
        for i, src in enumerate(sources):
            if n:
                table[i] = distance_field(grid, src)[ys, xs]
        if n and (table < 0).any():
            row, col = map(int, np.argwhere(table < 0)[0])
            raise Unreachable(self.waypoints[col])
        self.from_start = table[: len(self.starts)]
        self.between = table[len(self.starts):]

    def route_cost(self, uav: int, order: Sequence[int]) -> int:
        if not order:
            return 0
        cost = int(self.from_start[uav, order[0]])
        for a, b in zip(order, order[1:]):
            cost += int(self.between[a, b])
        return cost

    def to_assignment(self, orders: Sequence[Sequence[int]]) -> Assignment:
        routes = tuple(tuple(self.waypoints[i] for i in order) for order in orders)
        objective = sum(self.route_cost(u, order) for u, order in enumerate(orders))
        return Assignment(routes=routes, objective=objective)


def check_partition(assignment: Assignment, waypoints: Iterable[Cell]) -> None:
    flat = [wp for route in assignment.routes for wp in route]
    expected = sorted(waypoints, key=cell_order)
    if sorted(flat, key=cell_order) != expected:
        raise PartitionViolation(
            f"assignment covers {len(flat)} waypoints, expected {len(expected)} exactly once"
        )


# ---------------------------------------------------------------------------
# Route length
# ---------------------------------------------------------------------------


def route_length(grid: GridMap, start: Cell, ordered_waypoints: Sequence[Cell]) -> int:
    total = 0
    cur = start
    for wp in ordered_waypoints:
        total += shortest_distance(grid, cur, wp)
        cur = wp
    return total


# ---------------------------------------------------------------------------
# Nearest-neighbour baseline
# ---------------------------------------------------------------------------


def _nn_orders(table: DistanceTable) -> List[List[int]]:
    m, n = len(table.starts), len(table.waypoints)
    orders: List[List[int]] = [[] for _ in range(m)]
    unclaimed = set(range(n))
    while unclaimed:
        best: Optional[Tuple[int, int, Tuple[int, int], int]] = None
        for u in range(m):
            row = table.from_start[u] if not orders[u] else table.between[orders[u][-1]]
            for w in unclaimed:
                key = (int(row[w]), u, cell_order(table.waypoints[w]), w)
                if best is None or key < best:
                    best = key
        _, u, _, w = best
        orders[u].append(w)
        unclaimed.discard(w)
    return orders


def nearest_neighbor_assign(grid: GridMap, uav_positions: Sequence[Cell],
                            waypoints: Sequence[Cell]) -> Assignment:
    """Claim waypoints one at a time by minimal marginal distance from a route end."""
    if not uav_positions:
        raise Infeasible("no UAVs to assign to")
    table = DistanceTable(grid, uav_positions, waypoints)
    result = table.to_assignment(_nn_orders(table))
    check_partition(result, waypoints)
    return result


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


def brute_force_assign(grid: GridMap, uav_positions: Sequence[Cell],
                       waypoints: Sequence[Cell]) -> Assignment:
    """Optimal assignment by enumerating every labelling and every visiting order."""
    m, n = len(uav_positions), len(waypoints)
    if n > BRUTE_FORCE_MAX_WAYPOINTS or m > BRUTE_FORCE_MAX_UAVS:
        raise TooLarge(
            f"{m} UAVs x {n} waypoints exceeds {BRUTE_FORCE_MAX_UAVS} x {BRUTE_FORCE_MAX_WAYPOINTS}"
        )
    if m == 0:
        raise Infeasible("no UAVs to assign to")
    table = DistanceTable(grid, uav_positions, waypoints)

    best_order: Dict[Tuple[int, Tuple[int, ...]], Tuple[int, Tuple[int, ...]]] = {}

    def cheapest(u: int, subset: Tuple[int, ...]) -> Tuple[int, Tuple[int, ...]]:
        key = (u, subset)
        if key not in best_order:
            found = (0, ())
            if subset:
                found = min(
                    ((table.route_cost(u, perm), perm) for perm in itertools.permutations(subset)),
                )
            best_order[key] = found
        return best_order[key]

    best: Optional[Tuple[int, List[Tuple[int, ...]]]] = None
    for labels in itertools.product(range(m), repeat=n):
        subsets = [tuple(w for w in range(n) if labels[w] == u) for u in range(m)]
        parts = [cheapest(u, s) for u, s in enumerate(subsets)]
        total = sum(c for c, _ in parts)
        if best is None or total < best[0]:
            best = (total, [order for _, order in parts])

    result = table.to_assignment(best[1])
    check_partition(result, waypoints)
    return result


# ---------------------------------------------------------------------------
# Genetic algorithm
# ---------------------------------------------------------------------------


def _population_cost(table: DistanceTable, perms: np.ndarray, splits: np.ndarray) -> np.ndarray:
    """Vectorized objective for P genomes: perms (P, n), sorted splits (P, m-1)."""
    pop, n = perms.shape
    positions = np.arange(n)
    owner = (splits[:, :, None] <= positions[None, None, :]).sum(axis=1)  # (P, n)
    first = np.ones((pop, n), dtype=bool)
    if n > 1:
        first[:, 1:] = owner[:, 1:] != owner[:, :-1]
    start_cost = table.from_start[owner, perms]
    cost = np.where(first, start_cost, 0).sum(axis=1)
    if n > 1:
        legs = table.between[perms[:, :-1], perms[:, 1:]]
        cost += np.where(~first[:, 1:], legs, 0).sum(axis=1)
    return cost


def _decode(perm: np.ndarray, splits: np.ndarray, m: int) -> List[List[int]]:
    bounds = [0, *splits.tolist(), len(perm)]
    return [perm[bounds[u]:bounds[u + 1]].tolist() for u in range(m)]


def _encode(orders: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.array([w for order in orders for w in order], dtype=np.int64)
    splits = np.cumsum([len(o) for o in orders[:-1]]).astype(np.int64)
    return perm, splits


def _order_crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """OX1: keep a slice of `a`, fill the rest in `b`'s order starting after the slice."""
    n = len(a)
    if n < 2:
        return a.copy()
    i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
    child = np.full(n, -1, dtype=np.int64)
    child[i:j + 1] = a[i:j + 1]
    kept = set(a[i:j + 1].tolist())
    fill = [g for g in np.roll(b, -(j + 1)).tolist() if g not in kept]
    slots = [(j + 1 + k) % n for k in range(n - (j - i + 1))]
    child[slots] = fill
    return child


def _mutate(perm: np.ndarray, splits: np.ndarray, rate: float,
            rng: np.random.Generator) -> None:
    n = len(perm)
    if n >= 2 and rng.random() < rate:
        i, j = rng.choice(n, size=2, replace=False)
        perm[i], perm[j] = perm[j], perm[i]
    if len(splits) and rng.random() < rate:
        k = int(rng.integers(len(splits)))
        splits[k] = min(n, max(0, splits[k] + (1 if rng.random() < 0.5 else -1)))
        splits.sort()


def ga_evolve(grid: GridMap, uav_positions: Sequence[Cell], waypoints: Sequence[Cell],
              params: GaParams,
              seeds: Sequence[Assignment] = ()) -> GaRun:
    """
    Multi-depot GA over permutation + split genomes. The initial population
    holds the nearest-neighbour assignment and any `seeds` (same UAV order),
    so the result is never worse than either. At least one elite survives.
    """
    m, n = len(uav_positions), len(waypoints)
    if m == 0:
        raise Infeasible("no UAVs to assign to")
    try:
        table = DistanceTable(grid, uav_positions, waypoints)
    except Unreachable as exc:
        raise Infeasible(str(exc)) from exc
    if n == 0:
        empty = Assignment(routes=tuple(() for _ in range(m)), objective=0)
        return GaRun(assignment=empty, history=[0] * params.generations, evaluations=0)

    rng = np.random.default_rng(params.seed)
    index = {wp: i for i, wp in enumerate(table.waypoints)}

    perms = np.empty((params.population, n), dtype=np.int64)
    splits = np.empty((params.population, m - 1), dtype=np.int64)
    seeded = [_nn_orders(table)]
    for s in seeds:
        if len(s.routes) == m and sorted(w for r in s.routes for w in r) == sorted(waypoints):
            seeded.append([[index[w] for w in route] for route in s.routes])
    for p in range(params.population):
        if p < len(seeded):
            perms[p], splits[p] = _encode(seeded[p])
        else:
            perms[p] = rng.permutation(n)
            splits[p] = np.sort(rng.integers(0, n + 1, size=m - 1))

    elites = max(1, params.elitism)
    history: List[int] = []
    evaluations = 0
    best_cost: Optional[int] = None
    best_genome: Optional[Tuple[np.ndarray, np.ndarray]] = None

    for _ in range(params.generations):
        cost = _population_cost(table, perms, splits)
        evaluations += params.population
        ranked = np.argsort(cost, kind="stable")
        top = int(ranked[0])
        if best_cost is None or cost[top] < best_cost:
            best_cost = int(cost[top])
            best_genome = (perms[top].copy(), splits[top].copy())
        history.append(best_cost)

        next_perms = np.empty_like(perms)
        next_splits = np.empty_like(splits)
        next_perms[:elites] = perms[ranked[:elites]]
        next_splits[:elites] = splits[ranked[:elites]]
        for c in range(elites, params.population):
            pa, pb = (_tournament(cost, params.tournament, rng) for _ in range(2))
            if rng.random() < params.crossover_rate:
                child = _order_crossover(perms[pa], perms[pb], rng)
            else:
                child = perms[pa].copy()
            child_splits = (splits[pa] if rng.random() < 0.5 else splits[pb]).copy()
            _mutate(child, child_splits, params.mutation_rate, rng)
            next_perms[c] = child
            next_splits[c] = child_splits
        perms, splits = next_perms, next_splits

    result = table.to_assignment(_decode(best_genome[0], best_genome[1], m))
    check_partition(result, waypoints)
    logger.debug("GA: %d UAVs, %d waypoints, objective %d after %d evaluations",
                 m, n, result.objective, evaluations)
    return GaRun(assignment=result, history=history, evaluations=evaluations)


def _tournament(cost: np.ndarray, size: int, rng: np.random.Generator) -> int:
    picks = rng.choice(len(cost), size=min(size, len(cost)), replace=False)
    # lowest cost, then lowest index
    return int(min(picks.tolist(), key=lambda i: (int(cost[i]), i)))


def ga_assign(grid: GridMap, uav_positions: Sequence[Cell], waypoints: Sequence[Cell],
              params: GaParams, seeds: Sequence[Assignment] = ()) -> Assignment:
    return ga_evolve(grid, uav_positions, waypoints, params, seeds).assignment
