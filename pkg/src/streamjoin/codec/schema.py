"""Schemas and the two record encodings: canonical JSON and field-order binary.

The binary form carries no field names. Fields are written in schema order:

* int64: zigzag varint
* float64: 8 bytes little-endian IEEE-754
* string: varint byte length + UTF-8
* bytes: varint length + raw bytes
* bool: one byte 0/1
* array: varint count + elements
* optional: presence byte 0/1 + value when present
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Iterable, Mapping

from streamjoin.errors import (
    AlreadyExists,
    DecodeError,
    InvalidArgument,
    MalformedVarint,
    NotFound,
    SchemaViolation,
    TrailingBytes,
    TruncatedInput,
)

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1
_U64_MASK = (1 << 64) - 1

_F64 = struct.Struct("<d")


def write_uvarint(buf: bytearray, n: int) -> None:
    if n < 0x80:
        buf.append(n)
        return
    while n > 0x7F:
        buf.append((n & 0x7F) | 0x80)
        n >>= 7
    buf.append(n)


def uvarint(n: int) -> bytes:
    buf = bytearray()
    write_uvarint(buf, n)
    return bytes(buf)


def read_uvarint(data: bytes, pos: int) -> tuple[int, int]:
    end = len(data)
    if pos < end and data[pos] < 0x80:
        return data[pos], pos + 1
    result = 0
    shift = 0
    for i in range(10):
        if pos >= end:
            raise TruncatedInput("input ends inside a varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            if i == 9 and b > 1:
                raise MalformedVarint("varint overflows 64 bits")
            return result, pos
        shift += 7
    raise MalformedVarint("varint longer than 10 bytes")


def zigzag(n: int) -> int:
    return ((n << 1) ^ (n >> 63)) & _U64_MASK


def unzigzag(z: int) -> int:
    return (z >> 1) ^ -(z & 1)


@dataclass(frozen=True)
class FieldKind:
    tag: str
    item: FieldKind | None = None

    def __repr__(self) -> str:
        return self.tag if self.item is None else f"{self.tag}<{self.item!r}>"


INT64 = FieldKind("int64")
FLOAT64 = FieldKind("float64")
STRING = FieldKind("string")
BOOL = FieldKind("bool")
BYTES = FieldKind("bytes")


def array_of(kind: FieldKind) -> FieldKind:
    return FieldKind("array", kind)


def optional_of(kind: FieldKind) -> FieldKind:
    return FieldKind("optional", kind)


@dataclass(frozen=True)
class Schema:
    schema_id: int
    fields: tuple[tuple[str, FieldKind], ...]
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple((n, k) for n, k in self.fields))
        if not 0 <= self.schema_id <= 0xFFFF:
            raise InvalidArgument(f"schema_id must fit in 16 bits: {self.schema_id}")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise InvalidArgument(f"duplicate field names in schema {self.name or self.schema_id}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    def _cached(self, attr: str, build: Callable[[], Any]) -> Any:
        # compiled plans live on the instance; hashing a schema on every call is too slow
        v = self.__dict__.get(attr)
        if v is None:
            v = build()
            object.__setattr__(self, attr, v)
        return v


class SchemaRegistry:
    def __init__(self, schemas: Iterable[Schema] = ()) -> None:
        self._by_id: dict[int, Schema] = {}
        for s in schemas:
            self.register(s)

    def register(self, schema: Schema) -> None:
        existing = self._by_id.get(schema.schema_id)
        if existing is not None and existing != schema:
            raise AlreadyExists(f"schema id {schema.schema_id} already registered")
        self._by_id[schema.schema_id] = schema

    def get(self, schema_id: int) -> Schema:
        try:
            return self._by_id[schema_id]
        except KeyError:
            raise NotFound(f"unknown schema id {schema_id}") from None

    def __contains__(self, schema_id: int) -> bool:
        return schema_id in self._by_id


# -- compiled per-kind encoders/decoders -------------------------------------

Encoder = Callable[[bytearray, Any], None]
Decoder = Callable[[bytes, int], "tuple[Any, int]"]


def _violation(kind: FieldKind, value: Any) -> SchemaViolation:
    return SchemaViolation(f"expected {kind!r}, got {type(value).__name__}: {value!r:.60}")


def _encoder(kind: FieldKind) -> Encoder:
    enc = kind.__dict__.get("_enc")
    if enc is None:
        enc = _build_encoder(kind)
        object.__setattr__(kind, "_enc", enc)
    return enc


@lru_cache(maxsize=None)
def _build_encoder(kind: FieldKind) -> Encoder:
    tag = kind.tag
    if tag == "int64":

        def enc(buf: bytearray, v: Any) -> None:
            if v.__class__ is not int and (not isinstance(v, int) or isinstance(v, bool)):
                raise _violation(kind, v)
            if not INT64_MIN <= v <= INT64_MAX:
                raise _violation(kind, v)
            write_uvarint(buf, ((v << 1) ^ (v >> 63)) & _U64_MASK)

    elif tag == "float64":

        def enc(buf: bytearray, v: Any) -> None:
            if not isinstance(v, float):
                raise _violation(kind, v)
            buf += _F64.pack(v)

    elif tag == "string":

        def enc(buf: bytearray, v: Any) -> None:
            if not isinstance(v, str):
                raise _violation(kind, v)
            raw = v.encode("utf-8")
            write_uvarint(buf, len(raw))
            buf += raw

    elif tag == "bytes":

        def enc(buf: bytearray, v: Any) -> None:
            if not isinstance(v, (bytes, bytearray)):
                raise _violation(kind, v)
            write_uvarint(buf, len(v))
            buf += v

    elif tag == "bool":

        def enc(buf: bytearray, v: Any) -> None:
            if not isinstance(v, bool):
                raise _violation(kind, v)
            buf.append(1 if v else 0)

    elif tag == "array":
        assert kind.item is not None
        if kind.item.tag == "float64":

            def enc(buf: bytearray, v: Any) -> None:
                if not isinstance(v, (list, tuple)):
                    raise _violation(kind, v)
                write_uvarint(buf, len(v))
                try:
                    buf += struct.pack(f"<{len(v)}d", *v)
                except struct.error:
                    raise _violation(kind, v) from None
                if not all(isinstance(x, float) for x in v):
                    raise _violation(kind, v)

        elif kind.item.tag == "bytes":

            def enc(buf: bytearray, v: Any) -> None:
                if not isinstance(v, (list, tuple)):
                    raise _violation(kind, v)
                write_uvarint(buf, len(v))
                for x in v:
                    if not isinstance(x, (bytes, bytearray)):
                        raise _violation(kind, v)
                    n = len(x)
                    if n < 0x80:
                        buf.append(n)
                    else:
                        write_uvarint(buf, n)
                    buf += x

        elif kind.item.tag == "int64":

            def enc(buf: bytearray, v: Any) -> None:
                if not isinstance(v, (list, tuple)):
                    raise _violation(kind, v)
                write_uvarint(buf, len(v))
                for x in v:
                    if x.__class__ is not int or not INT64_MIN <= x <= INT64_MAX:
                        if isinstance(x, int) and not isinstance(x, bool) and INT64_MIN <= x <= INT64_MAX:
                            x = int(x)
                        else:
                            raise _violation(kind, v)
                    z = ((x << 1) ^ (x >> 63)) & _U64_MASK
                    if z < 0x80:
                        buf.append(z)
                    else:
                        write_uvarint(buf, z)

        else:
            item_enc = _encoder(kind.item)

            def enc(buf: bytearray, v: Any) -> None:
                if not isinstance(v, (list, tuple)):
                    raise _violation(kind, v)
                write_uvarint(buf, len(v))
                for x in v:
                    item_enc(buf, x)

    elif tag == "optional":
        assert kind.item is not None
        inner = _encoder(kind.item)

        def enc(buf: bytearray, v: Any) -> None:
            if v is None:
                buf.append(0)
            else:
                buf.append(1)
                inner(buf, v)

    else:
        raise InvalidArgument(f"unknown field kind {kind!r}")
    return enc


def _take(data: bytes, pos: int, n: int) -> int:
    end = pos + n
    if end > len(data):
        raise TruncatedInput(f"need {n} bytes at {pos}, have {len(data) - pos}")
    return end


def _decoder(kind: FieldKind) -> Decoder:
    dec = kind.__dict__.get("_dec")
    if dec is None:
        dec = _build_decoder(kind)
        object.__setattr__(kind, "_dec", dec)
    return dec


@lru_cache(maxsize=None)
def _build_decoder(kind: FieldKind) -> Decoder:
    tag = kind.tag
    if tag == "int64":

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            z, pos = read_uvarint(data, pos)
            return unzigzag(z), pos

    elif tag == "float64":

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            end = _take(data, pos, 8)
            return _F64.unpack_from(data, pos)[0], end

    elif tag == "string":

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            n, pos = read_uvarint(data, pos)
            end = _take(data, pos, n)
            try:
                return bytes(data[pos:end]).decode("utf-8"), end
            except UnicodeDecodeError as exc:
                raise DecodeError(f"invalid UTF-8 in string at {pos}") from exc

    elif tag == "bytes":

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            n, pos = read_uvarint(data, pos)
            end = _take(data, pos, n)
            return bytes(data[pos:end]), end

    elif tag == "bool":

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            end = _take(data, pos, 1)
            b = data[pos]
            if b > 1:
                raise DecodeError(f"bool byte must be 0 or 1, got {b}")
            return b == 1, end

    elif tag == "array":
        assert kind.item is not None
        if kind.item.tag == "float64":

            def dec(data: bytes, pos: int) -> tuple[Any, int]:
                n, pos = read_uvarint(data, pos)
                end = _take(data, pos, 8 * n)
                return list(struct.unpack_from(f"<{n}d", data, pos)), end

        else:
            item_dec = _decoder(kind.item)

            def dec(data: bytes, pos: int) -> tuple[Any, int]:
                n, pos = read_uvarint(data, pos)
                # every element occupies at least one byte
                if n > len(data) - pos:
                    raise TruncatedInput(f"array of {n} elements cannot fit in remaining input")
                out = []
                for _ in range(n):
                    x, pos = item_dec(data, pos)
                    out.append(x)
                return out, pos

    elif tag == "optional":
        assert kind.item is not None
        inner = _decoder(kind.item)

        def dec(data: bytes, pos: int) -> tuple[Any, int]:
            end = _take(data, pos, 1)
            flag = data[pos]
            if flag == 0:
                return None, end
            if flag != 1:
                raise DecodeError(f"presence byte must be 0 or 1, got {flag}")
            return inner(data, end)

    else:
        raise InvalidArgument(f"unknown field kind {kind!r}")
    return dec


def _record_plan(schema: Schema) -> tuple[tuple[tuple[str, Encoder], ...], tuple[tuple[str, Decoder], ...]]:
    return schema._cached(
        "_plan",
        lambda: (
            tuple((name, _encoder(kind)) for name, kind in schema.fields),
            tuple((name, _decoder(kind)) for name, kind in schema.fields),
        ),
    )


def _check_keys(record: Mapping[str, Any], schema: Schema) -> None:
    if record.keys() != schema._cached("_name_set", lambda: frozenset(schema.names)):
        extra = sorted(set(record) - set(schema.names))
        missing = sorted(set(schema.names) - set(record))
        raise SchemaViolation(f"record fields do not match schema: missing={missing} extra={extra}")


# -- straight-line record codecs ------------------------------------------------
#
# Each schema is compiled once into a single function with the common kinds
# inlined. The generated code only handles well-formed input of exact types;
# anything else drops to the per-kind path above, which raises the precise error.


class _Irregular(Exception):
    pass


def _enc_lines(kind: FieldKind, v: str, i: int, ind: str) -> list[str]:
    tag = kind.tag
    if tag == "int64":
        return [
            f"{ind}if {v}.__class__ is int and {INT64_MIN} <= {v} <= {INT64_MAX}:",
            f"{ind}    z = (({v} << 1) ^ ({v} >> 63)) & {_U64_MASK}",
            f"{ind}    if z < 128: ap(z)",
            f"{ind}    else: wv(buf, z)",
            f"{ind}else: e{i}(buf, {v})",
        ]
    if tag == "string":
        return [
            f"{ind}if {v}.__class__ is str:",
            f"{ind}    raw = {v}.encode('utf-8'); n = len(raw)",
            f"{ind}    if n < 128: ap(n)",
            f"{ind}    else: wv(buf, n)",
            f"{ind}    buf += raw",
            f"{ind}else: e{i}(buf, {v})",
        ]
    if tag == "bool":
        return [f"{ind}if {v} is True: ap(1)", f"{ind}elif {v} is False: ap(0)", f"{ind}else: e{i}(buf, {v})"]
    if tag == "optional" and kind.item is not None and kind.item.tag in ("int64", "string", "bool"):
        return [f"{ind}if {v} is None: ap(0)", f"{ind}else:", f"{ind}    ap(1)"] + _enc_lines(kind.item, v, i, ind + "    ")
    return [f"{ind}e{i}(buf, {v})"]


def _dec_lines(kind: FieldKind, v: str, i: int, ind: str) -> list[str]:
    tag = kind.tag
    if tag == "int64":
        return [
            f"{ind}b = data[pos]",
            f"{ind}if b < 128: pos += 1; {v} = (b >> 1) ^ -(b & 1)",
            f"{ind}else:",
            f"{ind}    z, pos = rv(data, pos); {v} = (z >> 1) ^ -(z & 1)",
        ]
    if tag == "string":
        return [
            f"{ind}n = data[pos]",
            f"{ind}if n < 128: pos += 1",
            f"{ind}else: n, pos = rv(data, pos)",
            f"{ind}end = pos + n",
            f"{ind}if end > size: raise _Irregular",
            f"{ind}{v} = data[pos:end].decode('utf-8'); pos = end",
        ]
    if tag == "bool":
        return [
            f"{ind}b = data[pos]",
            f"{ind}if b > 1: raise _Irregular",
            f"{ind}{v} = b == 1; pos += 1",
        ]
    if tag == "optional" and kind.item is not None and kind.item.tag in ("int64", "string", "bool"):
        return [
            f"{ind}f = data[pos]; pos += 1",
            f"{ind}if f == 0: {v} = None",
            f"{ind}elif f == 1:",
            *_dec_lines(kind.item, v, i, ind + "    "),
            f"{ind}else: raise _Irregular",
        ]
    return [f"{ind}{v}, pos = d{i}(data, pos)"]


def _compile(schema: Schema) -> tuple[Callable, Callable]:
    env: dict[str, Any] = {"wv": write_uvarint, "rv": read_uvarint, "_Irregular": _Irregular}
    enc_src = ["def encode(record):", "    buf = bytearray(); ap = buf.append"]
    dec_src = ["def decode(data):", "    pos = 0; size = len(data)"]
    for i, (name, kind) in enumerate(schema.fields):
        env[f"e{i}"] = _encoder(kind)
        env[f"d{i}"] = _decoder(kind)
        enc_src.append(f"    v{i} = record[{name!r}]")
        enc_src += _enc_lines(kind, f"v{i}", i, "    ")
        dec_src += _dec_lines(kind, f"v{i}", i, "    ")
    enc_src.append("    return bytes(buf)")
    dec_src.append("    if pos != size: raise _Irregular")
    dec_src.append("    return {" + ", ".join(f"{name!r}: v{i}" for i, (name, _) in enumerate(schema.fields)) + "}")
    exec("\n".join(enc_src), env)  # noqa: S102 - source built from the schema only
    exec("\n".join(dec_src), env)  # noqa: S102
    return env["encode"], env["decode"]


def _slow_encode(record: Mapping[str, Any], schema: Schema) -> bytes:
    buf = bytearray()
    for name, enc in _record_plan(schema)[0]:
        try:
            enc(buf, record[name])
        except SchemaViolation as exc:
            raise SchemaViolation(f"field {name!r}: {exc}") from None
    return bytes(buf)


def _slow_decode(data: bytes, schema: Schema) -> dict[str, Any]:
    pos = 0
    out: dict[str, Any] = {}
    for name, dec in _record_plan(schema)[1]:
        out[name], pos = dec(data, pos)
    if pos != len(data):
        raise TrailingBytes(f"{len(data) - pos} trailing bytes after record")
    return out


def encode_binary(record: Mapping[str, Any], schema: Schema) -> bytes:
    _check_keys(record, schema)
    try:
        return schema._cached("_compiled", lambda: _compile(schema))[0](record)
    except SchemaViolation:
        return _slow_encode(record, schema)


def decode_binary(data: bytes, schema: Schema) -> dict[str, Any]:
    if data.__class__ is bytes:
        try:
            return schema._cached("_compiled", lambda: _compile(schema))[1](data)
        except Exception:  # noqa: BLE001 - the slow path reports the exact defect
            pass
    return _slow_decode(data, schema)


def encode_value(kind: FieldKind, value: Any) -> bytes:
    buf = bytearray()
    _encoder(kind)(buf, value)
    return bytes(buf)


def decode_value(kind: FieldKind, data: bytes) -> Any:
    value, pos = _decoder(kind)(data, 0)
    if pos != len(data):
        raise TrailingBytes(f"{len(data) - pos} trailing bytes after value")
    return value


def _jsonable(kind: FieldKind, v: Any) -> Any:
    if v is None:
        return None
    tag = kind.tag
    if tag == "bytes":
        return base64.b64encode(v).decode("ascii")
    if tag == "float64":
        if not math.isfinite(v):
            raise SchemaViolation("non-finite float has no JSON representation")
        return v
    if tag == "array":
        assert kind.item is not None
        if kind.item.tag in ("bytes", "float64", "array", "optional"):
            return [_jsonable(kind.item, x) for x in v]
        return list(v)
    if tag == "optional":
        assert kind.item is not None
        return _jsonable(kind.item, v)
    return v


def encode_json(record: Mapping[str, Any], schema: Schema) -> bytes:
    """Canonical JSON: schema field order, no insignificant whitespace, UTF-8."""
    _check_keys(record, schema)
    obj = {}
    for (name, kind), (_, enc) in zip(schema.fields, _record_plan(schema)[0]):
        v = record[name]
        try:
            enc(bytearray(), v)
        except SchemaViolation as exc:
            raise SchemaViolation(f"field {name!r}: {exc}") from None
        obj[name] = _jsonable(kind, v)
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")
