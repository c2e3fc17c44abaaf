"""
Canonical Serialization — fixed-width, big-endian field encoding

Every payload size in the simulator is the length of the bytes produced here,
so byte counters are exact and assertable:

    cell            4 bytes   (>HH  x, y; absent cell = 0xFFFF, 0xFFFF)
    counter         4 bytes   (>I)
    delta entry     5 bytes   (cell + 1-byte state)
    time / real     8 bytes   (>d)
    kind/flag/code  1 byte    (>B)
    list            counter prefix, then the items
    flags           counter prefix, then the bits packed 8 per byte (MSB first)
"""

from __future__ import annotations

import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np

Cell = Tuple[int, int]

CELL_BYTES = 4
COUNTER_BYTES = 4
DELTA_BYTES = 5
REAL_BYTES = 8
CODE_BYTES = 1

_ABSENT = 0xFFFF

_CELL = struct.Struct(">HH")
_COUNTER = struct.Struct(">I")
_REAL = struct.Struct(">d")
_CODE = struct.Struct(">B")


class CodecError(ValueError):
    """Truncated or malformed canonical bytes."""


class Writer:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def cell(self, cell: Optional[Cell]) -> "Writer":
        if cell is None:
            self._parts.append(_CELL.pack(_ABSENT, _ABSENT))
        else:
            self._parts.append(_CELL.pack(cell[0], cell[1]))
        return self

    def counter(self, value: int) -> "Writer":
        self._parts.append(_COUNTER.pack(value))
        return self

    def real(self, value: float) -> "Writer":
        self._parts.append(_REAL.pack(value))
        return self

    def code(self, value: int) -> "Writer":
        self._parts.append(_CODE.pack(value))
        return self

    def cells(self, cells: Sequence[Cell]) -> "Writer":
        self.counter(len(cells))
        for c in cells:
            self.cell(c)
        return self

    def deltas(self, entries: Sequence[Tuple[Cell, int]]) -> "Writer":
        self.counter(len(entries))
        for c, state in entries:
            self.cell(c)
            self.code(state)
        return self

    def flags(self, bits: Sequence[bool]) -> "Writer":
        self.counter(len(bits))
        self._parts.append(np.packbits(np.asarray(bits, dtype=bool)).tobytes())
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, fmt: struct.Struct) -> tuple:
        end = self._pos + fmt.size
        if end > len(self._data):
            raise CodecError(f"truncated record at byte {self._pos}")
        values = fmt.unpack_from(self._data, self._pos)
        self._pos = end
        return values

    def cell(self) -> Optional[Cell]:
        x, y = self._take(_CELL)
        if x == _ABSENT and y == _ABSENT:
            return None
        return (x, y)

    def counter(self) -> int:
        return self._take(_COUNTER)[0]

    def real(self) -> float:
        return self._take(_REAL)[0]

    def code(self) -> int:
        return self._take(_CODE)[0]

    def cells(self) -> List[Cell]:
        n = self.counter()
        out: List[Cell] = []
        for _ in range(n):
            c = self.cell()
            if c is None:
                raise CodecError("absent cell inside a cell list")
            out.append(c)
        return out

    def deltas(self) -> List[Tuple[Cell, int]]:
        n = self.counter()
        out: List[Tuple[Cell, int]] = []
        for _ in range(n):
            c = self.cell()
            if c is None:
                raise CodecError("absent cell inside a delta list")
            out.append((c, self.code()))
        return out

    def flags(self) -> List[bool]:
        n = self.counter()
        size = (n + 7) // 8
        if self._pos + size > len(self._data):
            raise CodecError(f"truncated flag list at byte {self._pos}")
        packed = np.frombuffer(self._data, dtype=np.uint8, count=size, offset=self._pos)
        self._pos += size
        return np.unpackbits(packed, count=n).astype(bool).tolist()

    def done(self) -> None:
        if self._pos != len(self._data):
            raise CodecError(f"{len(self._data) - self._pos} trailing bytes")


def cells_size(n: int) -> int:
    return COUNTER_BYTES + n * CELL_BYTES


def deltas_size(n: int) -> int:
    return COUNTER_BYTES + n * DELTA_BYTES


def flags_size(n: int) -> int:
    return COUNTER_BYTES + (n + 7) // 8
