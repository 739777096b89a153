"""Canonical byte layout shared by every hashed or stored structure.

Unsigned integers are 8-byte big-endian, hashes are raw 32 bytes, variable
byte strings and list counts carry a 4-byte big-endian prefix.
"""

from __future__ import annotations

import struct

from .crypto import Hash32

_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")
U64_MAX = (1 << 64) - 1


class DecodeError(ValueError):
    pass


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u64(self, value: int) -> "Writer":
        if not 0 <= value <= U64_MAX:
            raise ValueError(f"{value} does not fit in u64")
        self._parts.append(_U64.pack(value))
        return self

    def count(self, value: int) -> "Writer":
        self._parts.append(_U32.pack(value))
        return self

    def hash32(self, value: bytes) -> "Writer":
        if len(value) != 32:
            raise ValueError("hash field must be 32 bytes")
        self._parts.append(bytes(value))
        return self

    def blob(self, value: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(value)))
        self._parts.append(bytes(value))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError("truncated input")
        chunk = bytes(self._data[self._pos:end])
        self._pos = end
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def count(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def hash32(self) -> Hash32:
        return Hash32(self._take(32))

    def blob(self) -> bytes:
        return self._take(self.count())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def finish(self) -> None:
        if self.remaining():
            raise DecodeError(f"{self.remaining()} trailing bytes")
