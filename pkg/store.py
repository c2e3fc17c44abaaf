"""
Long-Term Store — BS episode log, (uav_id, sync_round) index, merged map knowledge

Optional append-only file persistence. Record layout, repeated:

    4-byte big-endian length  |  EpisodeSummary canonical bytes  |  b"\\n"
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from codec import CodecError
from config import logger
from helpers import Cell
from memory import EpisodeSummary
from world import CellState, LocalMapCache

IndexKey = Tuple[int, int]

_LENGTH = struct.Struct(">I")


class EpisodeError(Exception):
    """Base class for long-term store failures."""


class DuplicateEpisode(EpisodeError):
    def __init__(self, key: IndexKey) -> None:
        super().__init__(f"episode {key} already ingested")
        self.key = key


class MissingEpisode(EpisodeError, KeyError):
    pass


def merge_deltas(known: LocalMapCache, deltas: Iterable[Tuple[Cell, int]],
                 timestamp: float) -> List[Cell]:
    """
    Last-writer-wins by report timestamp. Unknown cells always take the report;
    a known cell only changes when the report is not older than what set it.
    """
    changed: List[Cell] = []
    for (x, y), state in deltas:
        seen_at = known.observed_at[y, x]
        if known.states[y, x] == CellState.UNKNOWN or not timestamp < seen_at:
            if known.states[y, x] != state:
                changed.append((x, y))
            known.states[y, x] = state
            known.observed_at[y, x] = timestamp
    return changed


class LongTermStore:
    """Single-writer store owned by the base station."""

    def __init__(self, width: int, height: int, path: Optional[Path] = None) -> None:
        self.episodes: List[EpisodeSummary] = []
        self.index: Dict[IndexKey, int] = {}
        self.global_map = LocalMapCache(width, height)
        self.duplicates = 0
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def __len__(self) -> int:
        return len(self.episodes)

    def known_obstacles(self) -> set:
        return self.global_map.known_obstacles()

    def retrieve(self, key: IndexKey) -> EpisodeSummary:
        offset = self.index.get(key)
        if offset is None:
            raise MissingEpisode(key)
        return self.episodes[offset]

    def recent(self, uav_id: int, rounds: int) -> List[EpisodeSummary]:
        """Last `rounds` episodes of one UAV, oldest first."""
        mine = [e for e in self.episodes if e.uav_id == uav_id]
        mine.sort(key=lambda e: e.sync_round)
        return mine[-rounds:] if rounds > 0 else []

    @retry(
        stop=stop_after_attempt(3),
        wait=wait_fixed(0.1),
        retry=retry_if_exception_type(OSError),
        reraise=True,
        before_sleep=lambda rs: logger.warning(
            "⚠ Store write failed, retrying (%d/3): %s",
            rs.attempt_number, rs.outcome.exception(),
        ),
    )
    def _append_record(self, data: bytes) -> None:
        with open(self.path, "ab") as f:
            f.write(_LENGTH.pack(len(data)) + data + b"\n")


def ingest(lts: LongTermStore, summary: EpisodeSummary) -> IndexKey:
    key = (summary.uav_id, summary.sync_round)
    if key in lts.index:
        lts.duplicates += 1
        logger.warning("⚠ Duplicate episode %s ignored", key)
        raise DuplicateEpisode(key)
    if lts.path is not None:
        lts._append_record(summary.to_bytes())
    lts.index[key] = len(lts.episodes)
    lts.episodes.append(summary)
    merge_deltas(lts.global_map, summary.obstacle_deltas, summary.timestamp)
    return key


def replay(path: Path, width: int, height: int) -> LongTermStore:
    """Rebuild a store from its persistence file (the rebuilt store is in-memory)."""
    data = Path(path).read_bytes()
    lts = LongTermStore(width, height)
    pos = 0
    while pos < len(data):
        if pos + _LENGTH.size > len(data):
            raise CodecError(f"truncated length prefix at byte {pos}")
        (size,) = _LENGTH.unpack_from(data, pos)
        start = pos + _LENGTH.size
        end = start + size
        if end + 1 > len(data) or data[end:end + 1] != b"\n":
            raise CodecError(f"malformed record at byte {pos}")
        ingest(lts, EpisodeSummary.from_bytes(data[start:end]))
        pos = end + 1
    logger.info("✓ Replayed %d episodes from %s", len(lts), path)
    return lts
