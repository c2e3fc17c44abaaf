"""
Scenario — JSON document schema, validation diagnostics, procedural materialization

Document layout (unknown keys are rejected at every level):

    {
      "map":  {"width": 64, "height": 64, "obstacles": [[x, y], ...] | "obstacle_density": 0.1},
      "uavs": [{"start": [x, y], "energy": 5000.0}, ...],
      "waypoints": [[x, y], ...] | {"count": 24},
      "link": {...}, "costs": {...}, "seed": 0,
      "tools": [...], "agents": {...}, "ga": {...}, "memory": {...},
      "constraints": {...}, "sim": {...}
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as SchemaError

from config import (
    COST_DEFAULTS,
    DEFAULT_UAV_ENERGY,
    ENERGY_RESERVE_FLOOR,
    CONFIDENCE_STEP,
    CONFIDENCE_THRESHOLD,
    FALLBACK_TRIGGER,
    GA_CROSSOVER_RATE,
    GA_ELITISM,
    GA_GENERATIONS,
    GA_MUTATION_RATE,
    GA_POPULATION,
    GA_TOURNAMENT,
    HEURISTIC_WEIGHT,
    HEURISTIC_WEIGHT_CAP,
    LATENCY_BUDGET,
    LINK_BANDWIDTH,
    LINK_P_DOWN,
    LINK_P_UP,
    LINK_RTT,
    MAX_MAP_ATTEMPTS,
    QUEUE_CAPACITY,
    SENSOR_RADIUS,
    STM_CAPACITY,
    STM_REFRESH_KEEP,
    SYNC_INTERVAL,
    SYNC_TIMEOUT,
    TICK_LIMIT,
    WEIGHT_STEP,
    logger,
)
from helpers import Cell, apply_override, as_cell, cell_order, derive_seed, make_rng
from link import LinkParams
from planner_fast import ConstraintSet, PlannerParams
from planner_global import GaParams
from toolkit import DuplicateName, ToolRegistry
from world import CellState, CostModel, GridMap


class ParseError(Exception):
    """Malformed text or a document that does not fit the schema."""

    def __init__(self, message: str, line: Optional[int] = None,
                 column: Optional[int] = None, field: Optional[str] = None) -> None:
        super().__init__(message)
        self.line = line
        self.column = column
        self.field = field

    def diagnostic(self) -> str:
        where = f"line {self.line}, column {self.column}" if self.line is not None else self.field
        return f"parse error: {where}: {self}" if where else f"parse error: {self}"


class ValidationError(Exception):
    """A well-formed document whose values break a scenario rule."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message

    def diagnostic(self) -> str:
        return f"invalid: {self.field}: {self.message}"


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

Point = Tuple[int, int]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MapSpec(_Strict):
    width: int = Field(gt=0, lt=0xFFFF)
    height: int = Field(gt=0, lt=0xFFFF)
    obstacles: Optional[List[Point]] = None
    obstacle_density: Optional[float] = Field(default=None, ge=0.0, lt=1.0)


class UavSpec(_Strict):
    start: Point
    energy: float = Field(default=DEFAULT_UAV_ENERGY, ge=0.0)


class WaypointCount(_Strict):
    count: int = Field(ge=0)


class LinkSpec(_Strict):
    p_down: float = Field(default=LINK_P_DOWN, ge=0.0, le=1.0)
    p_up: float = Field(default=LINK_P_UP, ge=0.0, le=1.0)
    bandwidth: float = Field(default=LINK_BANDWIDTH, gt=0.0)
    rtt: float = Field(default=LINK_RTT, ge=0.0)
    queue_capacity: int = Field(default=QUEUE_CAPACITY, ge=1)
    outage_from: Optional[int] = Field(default=None, ge=0)
    outage_until: Optional[int] = Field(default=None, ge=0)


class CostSpec(_Strict):
    t_slm: float = Field(default=COST_DEFAULTS["t_slm"], ge=0.0)
    t_llm: float = Field(default=COST_DEFAULTS["t_llm"], ge=0.0)
    e_slm: float = Field(default=COST_DEFAULTS["e_slm"], ge=0.0)
    e_llm: float = Field(default=COST_DEFAULTS["e_llm"], ge=0.0)
    e_flight: float = Field(default=COST_DEFAULTS["e_flight"], ge=0.0)
    e_hover: float = Field(default=COST_DEFAULTS["e_hover"], ge=0.0)
    e_tx: float = Field(default=COST_DEFAULTS["e_tx"], ge=0.0)


class ToolSpec(_Strict):
    name: str = Field(min_length=1)
    tier: Literal["onboard", "ground"]
    tags: List[str] = []
    latency_cost: float = Field(default=0.0, ge=0.0)
    energy_cost: float = Field(default=0.0, ge=0.0)
    resource_floor: float = Field(default=0.0, ge=0.0)


class AgentSpec(_Strict):
    sync_interval: int = Field(default=SYNC_INTERVAL, ge=1)
    sync_timeout: float = Field(default=SYNC_TIMEOUT, ge=0.0)
    heuristic_weight: float = Field(default=HEURISTIC_WEIGHT, ge=1.0, le=HEURISTIC_WEIGHT_CAP)
    confidence_threshold: float = Field(default=CONFIDENCE_THRESHOLD, ge=0.0, le=1.0)
    fallback_trigger: int = Field(default=FALLBACK_TRIGGER, ge=0)
    weight_step: float = Field(default=WEIGHT_STEP, ge=0.0)
    confidence_step: float = Field(default=CONFIDENCE_STEP, ge=0.0)
    latency_budget: float = Field(default=LATENCY_BUDGET, gt=0.0)


class GaSpec(_Strict):
    population: int = Field(default=GA_POPULATION, ge=2)
    generations: int = Field(default=GA_GENERATIONS, ge=1)
    crossover_rate: float = Field(default=GA_CROSSOVER_RATE, ge=0.0, le=1.0)
    mutation_rate: float = Field(default=GA_MUTATION_RATE, ge=0.0, le=1.0)
    elitism: int = Field(default=GA_ELITISM, ge=0)
    tournament: int = Field(default=GA_TOURNAMENT, ge=1)


class MemorySpec(_Strict):
    capacity: int = Field(default=STM_CAPACITY, gt=0)
    refresh_keep: int = Field(default=STM_REFRESH_KEEP, ge=0)


class ConstraintSpec(_Strict):
    no_fly: List[Point] = []
    energy_reserve_floor: float = Field(default=ENERGY_RESERVE_FLOOR, ge=0.0)


class SimSpec(_Strict):
    tick_limit: int = Field(default=TICK_LIMIT, ge=1)
    sensor_radius: int = Field(default=SENSOR_RADIUS, ge=0)


class ScenarioDoc(_Strict):
    map: MapSpec
    uavs: List[UavSpec] = Field(min_length=1, max_length=254)
    waypoints: Union[List[Point], WaypointCount]
    link: LinkSpec = LinkSpec()
    costs: CostSpec = CostSpec()
    seed: int = Field(default=0, ge=0)
    tools: Optional[List[ToolSpec]] = None
    agents: AgentSpec = AgentSpec()
    ga: GaSpec = GaSpec()
    memory: MemorySpec = MemorySpec()
    constraints: ConstraintSpec = ConstraintSpec()
    sim: SimSpec = SimSpec()


def _schema_tree(model: type) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for name, info in model.model_fields.items():
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            tree[name] = _schema_tree(ann)
        else:
            tree[name] = None
    return tree


# Dotted keys accepted by `--set`; leaves map to None.
OVERRIDABLE: Dict[str, Any] = _schema_tree(ScenarioDoc)

_STRUCTURAL = ("missing", "extra_forbidden", "_type", "_parsing", "union_tag", "literal_error")


def _field_path(loc: Tuple[Any, ...]) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        elif isinstance(part, str) and (part.startswith(("list[", "tuple[")) or part[:1].isupper()):
            continue  # union member label
        else:
            out += f".{part}" if out else str(part)
    return out or "<root>"


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    document: Dict[str, Any]
    spec: ScenarioDoc
    grid: GridMap
    starts: List[Cell]
    energies: List[float]
    waypoints: List[Cell]
    link: LinkParams
    costs: CostModel
    tools: ToolRegistry
    planner_params: PlannerParams
    constraints: ConstraintSet
    ga: GaParams
    seed: int
    procedural: bool = False
    source: Optional[Path] = field(default=None)

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def agents(self) -> AgentSpec:
        return self.spec.agents

    @property
    def memory(self) -> MemorySpec:
        return self.spec.memory

    @property
    def tick_limit(self) -> int:
        return self.spec.sim.tick_limit

    @property
    def sensor_radius(self) -> int:
        return self.spec.sim.sensor_radius

    def for_seed(self, seed: int) -> "Scenario":
        """Same document under another run seed; procedural parts are regenerated."""
        if seed == self.seed:
            return self
        doc = copy.deepcopy(self.document)
        doc["seed"] = seed
        return build_scenario(doc, source=self.source)


def load_scenario(config_text: str, overrides: Optional[Dict[str, Any]] = None,
                  source: Optional[Path] = None) -> Scenario:
    try:
        document = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, column=exc.colno) from exc
    if not isinstance(document, dict):
        raise ParseError("scenario must be a JSON object", line=1, column=1)
    for key, value in (overrides or {}).items():
        apply_override(document, key, value, OVERRIDABLE)
    return build_scenario(document, source=source)


def load_scenario_file(path: Union[str, Path],
                       overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return load_scenario(text, overrides=overrides, source=path)


def build_scenario(document: Dict[str, Any], source: Optional[Path] = None) -> Scenario:
    try:
        spec = ScenarioDoc.model_validate(document)
    except SchemaError as exc:
        first = exc.errors()[0]
        path = _field_path(first["loc"])
        if any(tag in first["type"] for tag in _STRUCTURAL):
            raise ParseError(first["msg"], field=path) from exc
        raise ValidationError(path, first["msg"]) from exc

    seed = spec.seed
    m = spec.map
    no_fly = [as_cell(c) for c in spec.constraints.no_fly]
    starts = [as_cell(u.start) for u in spec.uavs]

    _check_cross_fields(spec)
    for i, c in enumerate(no_fly):
        if not (0 <= c[0] < m.width and 0 <= c[1] < m.height):
            raise ValidationError(f"constraints.no_fly[{i}]", f"{c} outside {m.width}x{m.height} map")
    for i, c in enumerate(starts):
        if not (0 <= c[0] < m.width and 0 <= c[1] < m.height):
            raise ValidationError(f"uavs[{i}].start", f"{c} outside {m.width}x{m.height} map")
        if c in no_fly:
            raise ValidationError(f"uavs[{i}].start", f"{c} is a no-fly cell")

    procedural = False
    if m.obstacles is not None and m.obstacle_density is not None:
        raise ValidationError("map", "give obstacles or obstacle_density, not both")
    if m.obstacle_density is not None:
        procedural = True
        count = spec.waypoints.count if isinstance(spec.waypoints, WaypointCount) else len(spec.waypoints)
        grid = _generate_map(m.width, m.height, m.obstacle_density, starts, count, no_fly, seed)
    else:
        obstacles = [as_cell(c) for c in (m.obstacles or [])]
        for i, c in enumerate(obstacles):
            if not (0 <= c[0] < m.width and 0 <= c[1] < m.height):
                raise ValidationError(f"map.obstacles[{i}]", f"{c} outside {m.width}x{m.height} map")
        grid = GridMap.from_obstacles(m.width, m.height, obstacles)
    for i, c in enumerate(starts):
        if not grid.is_free(c):
            raise ValidationError(f"uavs[{i}].start", f"{c} is an obstacle")

    if isinstance(spec.waypoints, WaypointCount):
        procedural = True
        waypoints = _sample_waypoints(grid, starts, no_fly, spec.waypoints.count, seed)
    else:
        waypoints = [as_cell(c) for c in spec.waypoints]
        _check_waypoints(grid, waypoints, no_fly)
    _check_reachable(grid.with_blocked(no_fly), starts, waypoints)

    try:
        tools = ToolRegistry.from_config(
            None if spec.tools is None else [t.model_dump() for t in spec.tools]
        )
    except DuplicateName as exc:
        raise ValidationError("tools", str(exc)) from exc

    a = spec.agents
    scenario = Scenario(
        document=copy.deepcopy(document),
        spec=spec,
        grid=grid,
        starts=starts,
        energies=[u.energy for u in spec.uavs],
        waypoints=waypoints,
        link=LinkParams(**spec.link.model_dump()),
        costs=CostModel(**spec.costs.model_dump()),
        tools=tools,
        planner_params=PlannerParams(a.heuristic_weight, a.confidence_threshold, a.sync_interval),
        constraints=ConstraintSet(frozenset(no_fly), spec.constraints.energy_reserve_floor),
        ga=GaParams(seed=derive_seed(seed, "ga"), **spec.ga.model_dump()),
        seed=seed,
        procedural=procedural,
        source=source,
    )
    logger.debug("Scenario %dx%d, %d UAVs, %d waypoints, seed %d",
                 grid.width, grid.height, len(starts), len(waypoints), seed)
    return scenario


def _check_cross_fields(spec: ScenarioDoc) -> None:
    c = spec.costs
    if not c.t_slm < c.t_llm:
        raise ValidationError("costs.t_slm", "must be smaller than costs.t_llm")
    if not c.e_slm < c.e_llm:
        raise ValidationError("costs.e_slm", "must be smaller than costs.e_llm")
    if spec.ga.elitism >= spec.ga.population:
        raise ValidationError("ga.elitism", "must be smaller than ga.population")
    lk = spec.link
    if lk.outage_until is not None and (lk.outage_from is None or lk.outage_until < lk.outage_from):
        raise ValidationError("link.outage_until", "needs outage_from <= outage_until")


def _check_waypoints(grid: GridMap, waypoints: List[Cell], no_fly: List[Cell]) -> None:
    seen: Dict[Cell, int] = {}
    for i, c in enumerate(waypoints):
        where = f"waypoints[{i}]"
        if not grid.in_bounds(c):
            raise ValidationError(where, f"{c} outside {grid.width}x{grid.height} map")
        if not grid.is_free(c):
            raise ValidationError(where, f"{c} is an obstacle")
        if c in no_fly:
            raise ValidationError(where, f"{c} is a no-fly cell")
        if c in seen:
            raise ValidationError(where, f"{c} duplicates waypoints[{seen[c]}]")
        seen[c] = i


def _check_reachable(routing: GridMap, starts: List[Cell], waypoints: List[Cell]) -> None:
    components = {}
    for j, s in enumerate(starts):
        if s not in components:
            components[s] = routing.component(s)
        for i, wp in enumerate(waypoints):
            if wp not in components[s]:
                raise ValidationError(f"waypoints[{i}]", f"{wp} unreachable from uavs[{j}]")


def _generate_map(width: int, height: int, density: float, starts: List[Cell],
                  waypoint_count: int, no_fly: List[Cell], seed: int) -> GridMap:
    """Random obstacles until every start shares one component with room for the waypoints."""
    rng = make_rng(seed, "map")
    for attempt in range(1, MAX_MAP_ATTEMPTS + 1):
        arr = (rng.random((height, width)) < density).astype(np.int8)
        for x, y in starts:
            arr[y, x] = CellState.FREE
        grid = GridMap(arr)
        routing = grid.with_blocked(no_fly)
        comp = routing.component(starts[0])
        if all(s in comp for s in starts) and len(comp - set(starts)) >= waypoint_count:
            if attempt > 1:
                logger.debug("Map generated after %d attempts", attempt)
            return grid
    raise ValidationError("map.obstacle_density",
                          f"no connected map after {MAX_MAP_ATTEMPTS} attempts")


def _sample_waypoints(grid: GridMap, starts: List[Cell], no_fly: List[Cell],
                      count: int, seed: int) -> List[Cell]:
    comp = grid.with_blocked(no_fly).component(starts[0])
    candidates = sorted(comp - set(starts), key=cell_order)
    if count > len(candidates):
        raise ValidationError("waypoints.count",
                              f"{count} requested, {len(candidates)} reachable free cells")
    rng = make_rng(seed, "waypoints")
    picks = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[int(i)] for i in picks]
