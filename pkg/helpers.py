"""
Utility / Helper Functions
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

Cell = Tuple[int, int]

# Neighbour order is fixed so every search expands deterministically.
_STEPS: Tuple[Cell, ...] = ((0, -1), (-1, 0), (1, 0), (0, 1))


class UnknownOverride(ValueError):
    """A `--set key=value` path that is not part of the scenario schema."""


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for one concern (link, ga, map...). 32-bit."""
    digest = hashlib.md5(f"{seed}:{label}".encode()).hexdigest()
    return int(digest[:8], 16)


def make_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def chebyshev(a: Cell, b: Cell) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def cell_order(cell: Cell) -> Tuple[int, int]:
    """Tie-break key: lower (y, x) first."""
    return (cell[1], cell[0])


def neighbors4(cell: Cell, width: int, height: int) -> Iterator[Cell]:
    x, y = cell
    for dx, dy in _STEPS:
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            yield (nx, ny)


def is_adjacent_or_same(a: Cell, b: Cell) -> bool:
    return manhattan(a, b) <= 1


def as_cell(value: Sequence[int]) -> Cell:
    return (int(value[0]), int(value[1]))


def round6(value: float) -> float:
    return float(f"{value:.6f}")


# ---------------------------------------------------------------------------
# CLI parsing
# ---------------------------------------------------------------------------


def parse_seeds(text: str) -> List[int]:
    """
    Parse a seed list: "7", "1,2,5" or a range "0..19" (inclusive).
    Empty text gives an empty list; the caller decides whether that is fatal.
    """
    text = (text or "").strip()
    if not text:
        return []
    match = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", text)
    if match:
        lo, hi = int(match.group(1)), int(match.group(2))
        if hi < lo:
            raise ValueError(f"Empty seed range: {text}")
        return list(range(lo, hi + 1))
    return [int(part) for part in text.split(",") if part.strip()]


def parse_override(text: str) -> Tuple[str, Any]:
    """Split `key=value`; the value is read as JSON when it parses, else kept as text."""
    if "=" not in text:
        raise UnknownOverride(f"Override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise UnknownOverride(f"Empty override key: {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    return key, value


def parse_override_values(text: str) -> Tuple[str, List[Any]]:
    """Sweep form `key=v1,v2,v3`; each value is read like `parse_override`."""
    key, _ = parse_override(text)
    raw = text.split("=", 1)[1]
    values: List[Any] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(json.loads(part))
        except json.JSONDecodeError:
            values.append(part)
    if not values:
        raise UnknownOverride(f"No sweep values for {key!r}")
    return key, values


def apply_override(document: Dict[str, Any], key: str, value: Any,
                   allowed: Dict[str, Any]) -> None:
    """
    Set a dotted key inside a parsed scenario document.
    `allowed` is the nested schema description (see scenario.OVERRIDABLE);
    only leaves declared there may be touched.
    """
    parts = key.split(".")
    node_schema: Any = allowed
    for part in parts:
        if not isinstance(node_schema, dict) or part not in node_schema:
            raise UnknownOverride(f"Unknown config key: {key}")
        node_schema = node_schema[part]
    if isinstance(node_schema, dict):
        raise UnknownOverride(f"Config key is a section, not a value: {key}")

    target = document
    for part in parts[:-1]:
        existing = target.get(part)
        if not isinstance(existing, dict):
            existing = {}
            target[part] = existing
        target = existing
    target[parts[-1]] = value
