"""Canonical byte encoding and the project-wide digest.

Every field is written as a 4-byte big-endian length followed by its bytes.
Integers are 8-byte big-endian unsigned, strings are UTF-8, and lists are a
single field whose body is a 4-byte item count followed by one field per item.
The layout is documented in ``docs/encoding.md``.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Sequence

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
HASH_NAME = "sha256"


class EncodingError(ValueError):
    """Raised for malformed input to the encoder or decoder."""


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def enc_int(value: int) -> bytes:
    if value < 0 or value >= 1 << 64:
        raise EncodingError(f"integer out of range: {value}")
    return field(value.to_bytes(8, "big"))


def enc_str(value: str) -> bytes:
    return field(value.encode("utf-8"))


def enc_bytes(value: bytes) -> bytes:
    return field(bytes(value))


def enc_digest(value: bytes) -> bytes:
    if len(value) != DIGEST_SIZE:
        raise EncodingError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
    return field(value)


def enc_list(items: Iterable[bytes]) -> bytes:
    """Encode item bodies as one list field; each item becomes its own field."""
    items = list(items)
    return field(struct.pack(">I", len(items)) + b"".join(field(i) for i in items))


def enc_str_list(values: Sequence[str]) -> bytes:
    return enc_list(v.encode("utf-8") for v in values)


class Reader:
    """Strict cursor over a canonical byte string."""

    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise EncodingError("truncated input")
        out = bytes(self.data[self.pos:end])
        self.pos = end
        return out

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def field(self) -> bytes:
        (n,) = struct.unpack(">I", self._take(4))
        return self._take(n)

    def int(self) -> int:
        body = self.field()
        if len(body) != 8:
            raise EncodingError("integer field must be 8 bytes")
        return int.from_bytes(body, "big")

    def str(self) -> str:
        try:
            return self.field().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(f"invalid utf-8: {exc}") from None

    def digest(self) -> bytes:
        body = self.field()
        if len(body) != DIGEST_SIZE:
            raise EncodingError("digest field must be 32 bytes")
        return body

    def list(self) -> list["Reader"]:
        """Return one sub-reader per item of a list field."""
        sub = Reader(self.field())
        (count,) = struct.unpack(">I", sub._take(4))
        items = []
        for _ in range(count):
            items.append(Reader(sub.field()))
        sub.expect_end()
        return items

    def str_list(self) -> list[str]:
        return [item.str_whole() for item in self.list()]

    def str_whole(self) -> str:
        try:
            out = bytes(self.data[self.pos:]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(f"invalid utf-8: {exc}") from None
        self.pos = len(self.data)
        return out

    def bytes_whole(self) -> bytes:
        out = bytes(self.data[self.pos:])
        self.pos = len(self.data)
        return out

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise EncodingError(f"{len(self.data) - self.pos} trailing bytes")
