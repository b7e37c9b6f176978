"""Canonical encodings: little-endian binary for proofs, sorted compact JSON for records."""

from __future__ import annotations

import json
import struct
from typing import Any

from .errors import DecodeError
from .field import FIELD_BYTES, P, FieldElement

DIGEST_SIZE = 32


class Writer:
    """Append-only builder for the canonical binary proof format.

    Variable-length byte strings carry a 4-byte little-endian length
    prefix; digests and field elements are fixed width.
    """

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def fe(self, v) -> "Writer":
        v = v.value if isinstance(v, FieldElement) else int(v) % P
        self._parts.append(v.to_bytes(FIELD_BYTES, "little"))
        return self

    def fes(self, values) -> "Writer":
        self.u32(len(values))
        for v in values:
            self.fe(v)
        return self

    def digest(self, d: bytes) -> "Writer":
        if len(d) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
        self._parts.append(bytes(d))
        return self

    def blob(self, data: bytes) -> "Writer":
        self.u32(len(data))
        self._parts.append(bytes(data))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        out = bytes(self._data[self._pos:self._pos + n])
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def fe(self) -> int:
        return FieldElement.from_bytes(self._take(FIELD_BYTES)).value

    def fes(self) -> list[int]:
        n = self.u32()
        return [self.fe() for _ in range(n)]

    def digest(self) -> bytes:
        return self._take(DIGEST_SIZE)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def count(self, limit: int = 1 << 24) -> int:
        n = self.u32()
        if n > limit:
            raise DecodeError(f"element count {n} exceeds limit")
        return n

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")


def _reject_floats(obj: Any) -> None:
    if isinstance(obj, float):
        raise TypeError("canonical JSON admits integers only")
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError("canonical JSON keys must be strings")
            _reject_floats(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _reject_floats(v)


def canonical_json(obj: Any) -> bytes:
    """UTF-8, sorted keys, no insignificant whitespace, integers only."""
    _reject_floats(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_json(data: bytes | str) -> Any:
    try:
        return json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise DecodeError(f"invalid JSON: {exc}") from exc
