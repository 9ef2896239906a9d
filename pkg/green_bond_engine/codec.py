"""
Canonical binary encoding.

Signatures and digests need one byte layout per value, identical on every
platform. Two layers:

- ``encode_fields`` / ``decode_fields``: a sequence of byte strings, each
  preceded by a 4-byte big-endian length. Integers are 8-byte big-endian
  two's complement (``encode_int``).
- ``pack`` / ``unpack``: tagged values (None, bool, int, str, bytes, list,
  str-keyed map) built on the same primitives. Map keys are written in
  ascending order and decoding rejects anything that is not canonical, so
  ``pack(unpack(b)) == b`` for every accepted ``b``.
"""

from __future__ import annotations
import struct
from typing import Any, List, Tuple

from .core import EncodingError


__all__ = [
    'encode_int',
    'decode_int',
    'encode_fields',
    'decode_fields',
    'pack',
    'unpack',
    'frame',
    'read_frames',
]


_LEN = struct.Struct(">I")
_INT = struct.Struct(">q")

_NONE = b"N"
_TRUE = b"T"
_FALSE = b"F"
_INT_TAG = b"I"
_STR = b"S"
_BYTES = b"B"
_LIST = b"L"
_MAP = b"M"


def encode_int(value: int) -> bytes:
    try:
        return _INT.pack(value)
    except struct.error as exc:
        raise EncodingError(f"integer out of 64-bit range: {value}") from exc


def decode_int(raw: bytes) -> int:
    if len(raw) != _INT.size:
        raise EncodingError(f"integer field must be 8 bytes, got {len(raw)}")
    return _INT.unpack(raw)[0]


def encode_fields(*parts: bytes) -> bytes:
    """Length-prefix each part and concatenate, in the given order."""
    out = bytearray()
    for part in parts:
        out += _LEN.pack(len(part))
        out += part
    return bytes(out)


def decode_fields(raw: bytes, count: int) -> List[bytes]:
    """Split ``raw`` into exactly ``count`` length-prefixed fields."""
    parts: List[bytes] = []
    pos = 0
    for _ in range(count):
        if pos + 4 > len(raw):
            raise EncodingError("truncated field length")
        (size,) = _LEN.unpack_from(raw, pos)
        pos += 4
        if pos + size > len(raw):
            raise EncodingError("truncated field body")
        parts.append(raw[pos:pos + size])
        pos += size
    if pos != len(raw):
        raise EncodingError(f"{len(raw) - pos} trailing bytes")
    return parts


# =========================================================================
# Tagged values
# =========================================================================


def pack(value: Any) -> bytes:
    """Canonically encode a value tree."""
    out = bytearray()
    _pack_into(out, value)
    return bytes(out)


def _pack_into(out: bytearray, value: Any) -> None:
    if value is None:
        out += _NONE
    elif value is True:
        out += _TRUE
    elif value is False:
        out += _FALSE
    elif isinstance(value, int):
        out += _INT_TAG
        out += encode_int(value)
    elif isinstance(value, str):
        data = value.encode("utf-8")
        out += _STR
        out += _LEN.pack(len(data))
        out += data
    elif isinstance(value, (bytes, bytearray)):
        out += _BYTES
        out += _LEN.pack(len(value))
        out += value
    elif isinstance(value, (list, tuple)):
        out += _LIST
        out += _LEN.pack(len(value))
        for item in value:
            _pack_into(out, item)
    elif isinstance(value, dict):
        keys = list(value.keys())
        if not all(isinstance(k, str) for k in keys):
            raise EncodingError("map keys must be strings")
        out += _MAP
        out += _LEN.pack(len(keys))
        for key in sorted(keys):
            data = key.encode("utf-8")
            out += _LEN.pack(len(data))
            out += data
            _pack_into(out, value[key])
    else:
        raise EncodingError(f"cannot encode {type(value).__name__}")


def unpack(raw: bytes) -> Any:
    """Decode a value produced by :func:`pack`, rejecting non-canonical input."""
    value, pos = _unpack_from(raw, 0)
    if pos != len(raw):
        raise EncodingError(f"{len(raw) - pos} trailing bytes")
    return value


def _take(raw: bytes, pos: int, size: int) -> Tuple[bytes, int]:
    end = pos + size
    if end > len(raw):
        raise EncodingError("truncated value")
    return raw[pos:end], end


def _take_len(raw: bytes, pos: int) -> Tuple[int, int]:
    chunk, pos = _take(raw, pos, 4)
    return _LEN.unpack(chunk)[0], pos


def _unpack_from(raw: bytes, pos: int) -> Tuple[Any, int]:
    tag, pos = _take(raw, pos, 1)
    if tag == _NONE:
        return None, pos
    if tag == _TRUE:
        return True, pos
    if tag == _FALSE:
        return False, pos
    if tag == _INT_TAG:
        chunk, pos = _take(raw, pos, 8)
        return _INT.unpack(chunk)[0], pos
    if tag == _STR:
        size, pos = _take_len(raw, pos)
        chunk, pos = _take(raw, pos, size)
        try:
            return chunk.decode("utf-8"), pos
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid utf-8") from exc
    if tag == _BYTES:
        size, pos = _take_len(raw, pos)
        chunk, pos = _take(raw, pos, size)
        return bytes(chunk), pos
    if tag == _LIST:
        count, pos = _take_len(raw, pos)
        items = []
        for _ in range(count):
            item, pos = _unpack_from(raw, pos)
            items.append(item)
        return items, pos
    if tag == _MAP:
        count, pos = _take_len(raw, pos)
        result = {}
        previous = None
        for _ in range(count):
            size, pos = _take_len(raw, pos)
            chunk, pos = _take(raw, pos, size)
            try:
                key = chunk.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise EncodingError("invalid utf-8 key") from exc
            if previous is not None and key <= previous:
                raise EncodingError("map keys not strictly ascending")
            previous = key
            result[key], pos = _unpack_from(raw, pos)
        return result, pos
    raise EncodingError(f"unknown tag {tag!r}")


# =========================================================================
# Framing (ledger files and TCP)
# =========================================================================


def frame(record: bytes) -> bytes:
    """Prefix a record with its 4-byte big-endian length."""
    return _LEN.pack(len(record)) + record


def read_frames(raw: bytes) -> Tuple[List[bytes], int]:
    """
    Split a byte string into whole frames.

    Returns:
        (records, leftover) where ``leftover`` is the number of trailing bytes
        that do not form a whole frame.
    """
    records: List[bytes] = []
    pos = 0
    while pos + 4 <= len(raw):
        (size,) = _LEN.unpack_from(raw, pos)
        if pos + 4 + size > len(raw):
            break
        records.append(raw[pos + 4:pos + 4 + size])
        pos += 4 + size
    return records, len(raw) - pos
