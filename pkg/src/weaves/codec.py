"""Byte encodings for cell values and serialized runtime state.

Cell payloads are raw byte strings; the typed helpers below fix the layout
(little-endian, 8-byte scalars) so that values round-trip identically across
checkpoint files and migration payloads.

The tagged-value format is used wherever arbitrary (but plain) Python values
must be frozen: resumption logs, checkpoint sections, island payloads.
Supported value kinds: None, bool, int, float, bytes, str, and tuples/lists
of these (lists decode as tuples).
"""

import struct

_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")


def enc_int(v: int) -> bytes:
    return _I64.pack(v)


def dec_int(b: bytes) -> int:
    return _I64.unpack(b[:8])[0]


def enc_float(v: float) -> bytes:
    return _F64.pack(v)


def dec_float(b: bytes) -> float:
    return _F64.unpack(b[:8])[0]


def enc_floats(vals) -> bytes:
    return struct.pack("<%dd" % len(vals), *vals)


def dec_floats(b: bytes):
    n = len(b) // 8
    return list(struct.unpack("<%dd" % n, b[: 8 * n]))


def enc_addr(v: int) -> bytes:
    return _U64.pack(v)


def dec_addr(b: bytes) -> int:
    return _U64.unpack(b[:8])[0]


# --- tagged value stream -----------------------------------------------------

_T_NONE = b"N"
_T_TRUE = b"T"
_T_FALSE = b"F"
_T_INT = b"i"
_T_FLOAT = b"f"
_T_BYTES = b"b"
_T_STR = b"s"
_T_TUPLE = b"t"


def pack_value(v, out: bytearray) -> None:
    if v is None:
        out += _T_NONE
    elif v is True:
        out += _T_TRUE
    elif v is False:
        out += _T_FALSE
    elif isinstance(v, int):
        out += _T_INT
        out += _I64.pack(v)
    elif isinstance(v, float):
        out += _T_FLOAT
        out += _F64.pack(v)
    elif isinstance(v, bytes):
        out += _T_BYTES
        out += _U32.pack(len(v))
        out += v
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        out += _T_STR
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(v, (tuple, list)):
        out += _T_TUPLE
        out += _U32.pack(len(v))
        for item in v:
            pack_value(item, out)
    else:
        raise TypeError(f"value not serializable: {type(v).__name__}")


def unpack_value(buf: bytes, pos: int):
    tag = buf[pos : pos + 1]
    pos += 1
    if tag == _T_NONE:
        return None, pos
    if tag == _T_TRUE:
        return True, pos
    if tag == _T_FALSE:
        return False, pos
    if tag == _T_INT:
        return _I64.unpack_from(buf, pos)[0], pos + 8
    if tag == _T_FLOAT:
        return _F64.unpack_from(buf, pos)[0], pos + 8
    if tag == _T_BYTES:
        n = _U32.unpack_from(buf, pos)[0]
        pos += 4
        return bytes(buf[pos : pos + n]), pos + n
    if tag == _T_STR:
        n = _U32.unpack_from(buf, pos)[0]
        pos += 4
        return buf[pos : pos + n].decode("utf-8"), pos + n
    if tag == _T_TUPLE:
        n = _U32.unpack_from(buf, pos)[0]
        pos += 4
        items = []
        for _ in range(n):
            item, pos = unpack_value(buf, pos)
            items.append(item)
        return tuple(items), pos
    raise ValueError(f"bad value tag {tag!r} at offset {pos - 1}")


def dumps_value(v) -> bytes:
    out = bytearray()
    pack_value(v, out)
    return bytes(out)


def loads_value(buf: bytes):
    v, pos = unpack_value(buf, 0)
    if pos != len(buf):
        raise ValueError("trailing bytes after value")
    return v
