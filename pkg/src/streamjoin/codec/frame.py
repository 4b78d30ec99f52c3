"""Record framing: ``EC 01 | schema_id u16 BE | flags | uvarint uncompressed_len | payload``.

Flag bit 0 marks an LZ4-compressed payload. A payload is only stored
compressed when that is strictly smaller, so a frame never exceeds the
binary encoding plus the header.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from streamjoin.codec.lz4 import lz4_compress, lz4_decompress
from streamjoin.codec.schema import (
    Schema,
    SchemaRegistry,
    decode_binary,
    encode_binary,
    encode_json,
    read_uvarint,
    write_uvarint,
)
from streamjoin.errors import DecodeError, InvalidArgument, TruncatedInput

MAGIC = b"\xec\x01"
FLAG_LZ4 = 0x01


@dataclass(frozen=True)
class Frame:
    schema_id: int
    flags: int
    uncompressed_len: int
    payload: bytes

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FLAG_LZ4)

    def body(self) -> bytes:
        """The binary-encoded record, decompressed if needed."""
        if self.compressed:
            return lz4_decompress(self.payload, self.uncompressed_len)
        return self.payload


def encode_frame(frame: Frame) -> bytes:
    if not 0 <= frame.schema_id <= 0xFFFF or not 0 <= frame.flags <= 0xFF:
        raise InvalidArgument("schema_id or flags out of range")
    buf = bytearray(MAGIC)
    buf += frame.schema_id.to_bytes(2, "big")
    buf.append(frame.flags)
    write_uvarint(buf, frame.uncompressed_len)
    buf += frame.payload
    return bytes(buf)


def decode_frame(data: bytes) -> Frame:
    if len(data) < 5:
        raise TruncatedInput("frame shorter than its fixed header")
    if data[:2] != MAGIC:
        raise DecodeError(f"bad frame magic {bytes(data[:2]).hex()}")
    schema_id = int.from_bytes(data[2:4], "big")
    flags = data[4]
    length, pos = read_uvarint(data, 5)
    payload = bytes(data[pos:])
    if not flags & FLAG_LZ4 and length != len(payload):
        raise DecodeError(f"uncompressed frame declares {length} bytes but carries {len(payload)}")
    return Frame(schema_id, flags, length, payload)


def pack_record(record: Mapping[str, Any], schema: Schema, compress: bool = True) -> bytes:
    return pack_body(encode_binary(record, schema), schema, compress)


def pack_body(body: bytes, schema: Schema, compress: bool = True) -> bytes:
    """Frame an already binary-encoded record."""
    flags = 0
    payload = body
    if compress and body:
        packed = lz4_compress(body)
        if len(packed) < len(body):
            payload, flags = packed, FLAG_LZ4
    return encode_frame(Frame(schema.schema_id, flags, len(body), payload))


def unpack_record(data: bytes, registry: SchemaRegistry) -> tuple[Schema, dict[str, Any]]:
    frame = decode_frame(data)
    schema = registry.get(frame.schema_id)
    return schema, decode_binary(frame.body(), schema)


@dataclass(frozen=True)
class SizeReport:
    records: int
    json_bytes: int
    binary_bytes: int
    frame_bytes: int
    frame_uncompressed_bytes: int

    @property
    def reduction(self) -> float:
        return reduction_ratio(self.frame_bytes, self.json_bytes)

    @property
    def binary_reduction(self) -> float:
        return reduction_ratio(self.frame_uncompressed_bytes, self.json_bytes)


def reduction_ratio(encoded_total: int, json_total: int) -> float:
    if json_total <= 0:
        raise InvalidArgument("JSON total must be positive")
    return 1.0 - encoded_total / json_total


def size_report(corpus: Sequence[Mapping[str, Any]], schema: Schema) -> SizeReport:
    if not corpus:
        raise InvalidArgument("corpus must be non-empty")
    js = bi = fr = fu = 0
    for rec in corpus:
        js += len(encode_json(rec, schema))
        body_len = len(encode_binary(rec, schema))
        bi += body_len
        fr += len(pack_record(rec, schema, compress=True))
        fu += len(pack_record(rec, schema, compress=False))
    return SizeReport(len(corpus), js, bi, fr, fu)


def measure_reduction(corpus: Sequence[Mapping[str, Any]], schema: Schema) -> float:
    """``1 - sum(len(binary+LZ4 frame)) / sum(len(canonical JSON))`` over the corpus."""
    if not corpus:
        raise InvalidArgument("corpus must be non-empty")
    js = fr = 0
    for rec in corpus:
        js += len(encode_json(rec, schema))
        fr += len(pack_record(rec, schema, compress=True))
    return reduction_ratio(fr, js)
