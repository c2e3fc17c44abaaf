import copy
import sys
from collections import deque
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from helpers import Cell, neighbors4  # noqa: E402
from planner_fast import PlannerParams  # noqa: E402
from scenario import build_scenario  # noqa: E402
from world import CellState, GridMap, LocalMapCache, UavState  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long multi-seed acceptance runs")


def bfs_cost(grid: GridMap, start: Cell, goal: Cell, blocked: Iterable[Cell] = ()) -> Optional[int]:
    """Plain BFS hop count, the oracle every planner is checked against."""
    blocked = set(blocked)
    if not grid.is_free(goal) or goal in blocked:
        return None
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            return dist[cur]
        for nb in neighbors4(cur, grid.width, grid.height):
            if nb not in dist and grid.is_free(nb) and nb not in blocked:
                dist[nb] = dist[cur] + 1
                queue.append(nb)
    return None


def random_grid(seed: int, width: int, height: int, density: float = 0.2,
                keep: Iterable[Cell] = ()) -> GridMap:
    rng = np.random.default_rng(seed)
    arr = (rng.random((height, width)) < density).astype(np.int8)
    for x, y in keep:
        arr[y, x] = CellState.FREE
    return GridMap(arr)


def known_map(grid: GridMap) -> LocalMapCache:
    """A local cache that already knows the whole grid."""
    cache = LocalMapCache(grid.width, grid.height)
    cache.states[:] = grid.cells
    cache.observed_at[:] = 0.0
    return cache


def make_uav(position: Cell, residual=(), width: int = 8, height: int = 8, energy: float = 100.0,
             params: PlannerParams = PlannerParams(), local: Optional[LocalMapCache] = None,
             uav_id: int = 0) -> UavState:
    return UavState(
        id=uav_id,
        position=position,
        energy=energy,
        residual_waypoints=list(residual),
        local_map=local if local is not None else LocalMapCache(width, height),
        planner_params=params,
    )


BASE_DOC: Dict = {
    "map": {"width": 8, "height": 8, "obstacles": []},
    "uavs": [{"start": [0, 0]}],
    "waypoints": [[7, 7]],
    "link": {},
    "costs": {},
    "seed": 0,
}


def scenario_doc(**sections) -> Dict:
    doc = copy.deepcopy(BASE_DOC)
    for key, value in sections.items():
        doc[key] = value
    return doc


def make_scenario(**sections):
    return build_scenario(scenario_doc(**sections))


@pytest.fixture
def open_grid() -> GridMap:
    return GridMap.empty(8, 8)


@pytest.fixture
def wall_grid() -> GridMap:
    """8x8 with a vertical wall at x=3, gap at y=7."""
    return GridMap.from_obstacles(8, 8, [(3, y) for y in range(7)])


@pytest.fixture
def minimal_scenario():
    return build_scenario({
        "map": {"width": 4, "height": 4, "obstacles": []},
        "uavs": [{"start": [0, 0]}],
        "waypoints": [[3, 3]],
        "link": {},
        "costs": {},
        "seed": 0,
    })


@pytest.fixture
def scenario_dir() -> Path:
    return ROOT / "scenarios"
