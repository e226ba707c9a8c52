"""Canonical byte encoding shared by every hashed record.

Fields are written in a fixed order: integers big-endian and fixed width,
variable-length byte strings prefixed with a u32 length. Decoding is strict:
trailing bytes, short reads and out-of-range tags raise ``DecodeError``.
"""
from __future__ import annotations

import struct

from .constants import DIGEST_SIZE


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def digest(self, value: bytes) -> "Writer":
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        self._parts.append(value)
        return self

    def blob(self, value: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(value)))
        self._parts.append(value)
        return self

    def raw(self, value: bytes) -> "Writer":
        self._parts.append(value)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError("unexpected end of input")
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def digest(self) -> bytes:
        return self._take(DIGEST_SIZE)

    def blob(self, limit: int | None = None) -> bytes:
        n = self.u32()
        if limit is not None and n > limit:
            raise DecodeError(f"field length {n} exceeds limit {limit}")
        return self._take(n)

    def flag(self) -> bool:
        b = self.u8()
        if b > 1:
            raise DecodeError(f"invalid boolean byte {b}")
        return bool(b)

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")
