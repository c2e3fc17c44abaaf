"""
CLI Commands — validate, run, compare, sweep

Every command returns its exit code; main.py only maps argv onto these.
"""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import (
    CSV_COLUMNS,
    EXIT_CONFIG,
    EXIT_INVALID,
    EXIT_IO,
    EXIT_OK,
    EXIT_SIMULATION,
    REFERENCE_SCENARIO,
    SCENARIO_DIR,
    SWEEP_CAP,
    logger,
)
from experiment import (
    ComparisonTable,
    Mode,
    SimulationError,
    compare,
    emit,
    run,
)
from helpers import UnknownOverride, parse_override_values
from scenario import ParseError, Scenario, ValidationError, load_scenario_file


class SweepTooLarge(ValueError):
    def __init__(self, points: int, cap: int) -> None:
        super().__init__(f"sweep has {points} points, cap is {cap} (use --allow-large-sweep)")
        self.points = points
        self.cap = cap


def resolve_scenario(path: Optional[str]) -> Path:
    """Explicit path as given; bare names are looked up in the scenario directory."""
    if not path:
        return SCENARIO_DIR / REFERENCE_SCENARIO
    candidate = Path(path)
    if candidate.exists() or candidate.is_absolute():
        return candidate
    return SCENARIO_DIR / candidate


def _load(path: Optional[str], overrides: Optional[Dict[str, Any]]) -> Scenario:
    return load_scenario_file(resolve_scenario(path), overrides)


def _config_error(exc: Exception) -> int:
    if isinstance(exc, (ParseError, ValidationError)):
        print(exc.diagnostic())
    else:
        print(f"  ✗ {exc}")
    return EXIT_CONFIG


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> int:
    try:
        sc = _load(path, overrides)
    except ValidationError as exc:
        print(exc.diagnostic())
        return EXIT_INVALID
    except (ParseError, UnknownOverride, ValueError) as exc:
        return _config_error(exc)
    except OSError as exc:
        print(f"io error: {exc}")
        return EXIT_IO
    print("OK")
    logger.info("✓ %s: %dx%d, %d UAVs, %d waypoints", resolve_scenario(path),
                sc.width, sc.height, len(sc.starts), len(sc.waypoints))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(path: Optional[str], mode: str, seeds: Sequence[int],
            overrides: Optional[Dict[str, Any]] = None, out: Optional[str] = None,
            fmt: str = "csv") -> int:
    if not seeds:
        print("  ✗ run needs at least one seed")
        return EXIT_CONFIG
    try:
        sc = _load(path, overrides)
        mode_ = Mode.parse(mode)
    except (ParseError, ValidationError, UnknownOverride, ValueError) as exc:
        return _config_error(exc)
    except OSError as exc:
        print(f"io error: {exc}")
        return EXIT_IO

    frames = []
    try:
        for seed in seeds:
            report = run(sc, mode_, seed)
            print(f"\n{'═' * 60}")
            print(f"  {mode_.value} | seed {seed} | {report.status.value} | {report.ticks} ticks")
            print(f"{'─' * 60}")
            for u in report.uavs:
                print(f"  UAV {u.uav_id}: len={u.traj_len} wp={u.waypoints_done} "
                      f"lat={u.mean_latency:.3f}s energy={u.energy:.1f} "
                      f"up={u.uplink_bytes}B down={u.downlink_bytes}B fb={u.fallbacks}")
            frames.append(report.frame())
    except SimulationError as exc:
        print(f"  ✗ simulation error: {exc}")
        return EXIT_SIMULATION

    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=list(CSV_COLUMNS))
    return _write(table, fmt, out)


def _write(obj, fmt: str, out: Optional[str]) -> int:
    try:
        text = emit(obj, fmt, out)
    except OSError as exc:
        print(f"io error: {exc}")
        return EXIT_IO
    if out is None:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _print_verdicts(table: ComparisonTable) -> None:
    for name, verdict in table.verdicts.items():
        if verdict is None:
            flag = "N/A"
        else:
            flag = "PASS" if verdict else "FAIL"
        suffix = "  (low-confidence, n=1)" if table.low_confidence and verdict is not None else ""
        print(f"  {name:8s} ordering: {flag}{suffix}")
    for err in table.errors:
        print(f"  ⚠ {err}")


def cmd_compare(path: Optional[str], seeds: Sequence[int],
                modes: Optional[Sequence[str]] = None,
                overrides: Optional[Dict[str, Any]] = None, out: Optional[str] = None,
                fmt: str = "csv", workers: int = 1) -> int:
    if not seeds:
        print("  ✗ compare needs at least one seed (--seeds)")
        return EXIT_CONFIG
    try:
        sc = _load(path, overrides)
        mode_list = [Mode.parse(m) for m in (modes or [m.value for m in Mode])]
    except (ParseError, ValidationError, UnknownOverride, ValueError) as exc:
        return _config_error(exc)
    except OSError as exc:
        print(f"io error: {exc}")
        return EXIT_IO

    try:
        table = compare(sc, mode_list, seeds, workers=workers)
    except SimulationError as exc:
        print(f"  ✗ simulation error: {exc}")
        return EXIT_SIMULATION

    print(f"\n{'═' * 60}")
    print(f"  Compare {', '.join(m.value for m in mode_list)} over {len(seeds)} seed(s)")
    print(f"{'─' * 60}")
    for row in table.summary.to_dict(orient="records"):
        print(f"  {row['mode']:8s} len={row['traj_len_mean']:.1f}±{row['traj_len_std']:.1f} "
              f"lat={row['mean_latency_mean']:.3f}±{row['mean_latency_std']:.3f}s "
              f"up={row['uplink_bytes_mean']:.0f}B")
    _print_verdicts(table)
    return _write(table, fmt, out)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def sweep_points(specs: Sequence[str], cap: Optional[int] = SWEEP_CAP) -> List[Dict[str, Any]]:
    """Cartesian product of `key=v1,v2,...` lists, keys in the order given."""
    axes: List[Tuple[str, List[Any]]] = [parse_override_values(s) for s in specs]
    total = 1
    for _, values in axes:
        total *= len(values)
    if cap is not None and total > cap:
        raise SweepTooLarge(total, cap)
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]


def cmd_sweep(path: Optional[str], seeds: Sequence[int], sweeps: Sequence[str],
              modes: Optional[Sequence[str]] = None,
              overrides: Optional[Dict[str, Any]] = None, out: Optional[str] = None,
              fmt: str = "csv", allow_large: bool = False, workers: int = 1) -> int:
    if not seeds or not sweeps:
        print("  ✗ sweep needs --seeds and at least one --sweep key=v1,v2")
        return EXIT_CONFIG
    try:
        points = sweep_points(sweeps, None if allow_large else SWEEP_CAP)
        mode_list = [Mode.parse(m) for m in (modes or [m.value for m in Mode])]
    except (SweepTooLarge, UnknownOverride, ValueError) as exc:
        return _config_error(exc)

    blocks = []
    for i, point in enumerate(points, 1):
        merged = {**(overrides or {}), **point}
        label = " ".join(f"{k}={v}" for k, v in point.items())
        logger.info("Sweep point %d/%d: %s", i, len(points), label)
        try:
            sc = _load(path, merged)
        except (ParseError, ValidationError, UnknownOverride, ValueError) as exc:
            return _config_error(exc)
        except OSError as exc:
            print(f"io error: {exc}")
            return EXIT_IO
        try:
            table = compare(sc, mode_list, seeds, workers=workers)
        except SimulationError as exc:
            print(f"  ✗ simulation error at {label}: {exc}")
            return EXIT_SIMULATION
        print(f"\n  ── {label}")
        _print_verdicts(table)
        block = table.runs.copy()
        for col, (key, value) in enumerate(point.items()):
            block.insert(col, key, value)
        blocks.append(block)

    merged_frame = pd.concat(blocks, ignore_index=True)
    return _write(merged_frame, fmt, out)
