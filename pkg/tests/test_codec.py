from __future__ import annotations

import json
import os
import random
import struct

import lz4.block
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamjoin.codec.frame import (
    FLAG_LZ4,
    Frame,
    decode_frame,
    encode_frame,
    measure_reduction,
    pack_record,
    reduction_ratio,
    size_report,
    unpack_record,
)
from streamjoin.codec.lz4 import lz4_compress, lz4_decompress, max_compressed_size
from streamjoin.codec.records import (
    REGISTRY,
    SAMPLE_SCHEMA,
    VIEW_SCHEMA,
    pack_event,
    pack_sample,
    record_to_view,
    unpack_event,
    unpack_sample,
    view_to_record,
)
from streamjoin.codec.schema import (
    BOOL,
    BYTES,
    FLOAT64,
    INT64,
    STRING,
    Schema,
    SchemaRegistry,
    array_of,
    decode_binary,
    encode_binary,
    encode_json,
    optional_of,
)
from streamjoin.errors import (
    AlreadyExists,
    CorruptBlock,
    DecodeError,
    InvalidArgument,
    MalformedVarint,
    NotFound,
    SchemaViolation,
    TrailingBytes,
    TruncatedInput,
)
from streamjoin.model import EngagementEvent, SignalKind, ViewEvent, make_sample
from streamjoin.workload import WorkloadConfig, generate

A = Schema(1, (("a", INT64),))


def test_zigzag_small_ints():
    assert [encode_binary({"a": v}, A) for v in (0, -1, 1, -2)] == [b"\x00", b"\x01", b"\x02", b"\x03"]


def test_int64_extremes_round_trip():
    for v in (2**63 - 1, -(2**63), 300, -300):
        assert decode_binary(encode_binary({"a": v}, A), A) == {"a": v}


def test_empty_string_is_one_byte():
    s = Schema(2, (("s", STRING),))
    assert encode_binary({"s": ""}, s) == b"\x00"


def test_wire_layout_of_every_kind():
    s = Schema(3, (("f", FLOAT64), ("b", BOOL), ("arr", array_of(INT64)), ("o", optional_of(STRING)), ("n", optional_of(STRING))))
    data = encode_binary({"f": 1.5, "b": True, "arr": [1, -1], "o": "hi", "n": None}, s)
    assert data == struct.pack("<d", 1.5) + b"\x01" + b"\x02\x02\x01" + b"\x01\x02hi" + b"\x00"


def test_decode_zero():
    assert decode_binary(b"\x00", A) == {"a": 0}


def test_decode_errors():
    with pytest.raises(TruncatedInput):
        decode_binary(b"", A)
    with pytest.raises(TrailingBytes):
        decode_binary(b"\x00\x00", A)
    with pytest.raises(MalformedVarint):
        decode_binary(b"\xff" * 11, A)
    with pytest.raises(TruncatedInput):
        decode_binary(b"\x80", A)


def test_schema_violations():
    with pytest.raises(SchemaViolation):
        encode_binary({"a": "x"}, A)
    with pytest.raises(SchemaViolation):
        encode_binary({"a": 1, "b": 2}, A)
    with pytest.raises(SchemaViolation):
        encode_binary({}, A)
    with pytest.raises(SchemaViolation):
        encode_binary({"a": 2**63}, A)
    with pytest.raises(SchemaViolation):
        encode_json({"a": True}, A)


def test_schema_rules():
    with pytest.raises(InvalidArgument):
        Schema(1, (("a", INT64), ("a", STRING)))
    with pytest.raises(InvalidArgument):
        Schema(70000, ())
    reg = SchemaRegistry([A])
    with pytest.raises(AlreadyExists):
        reg.register(Schema(1, (("b", INT64),)))
    with pytest.raises(NotFound):
        reg.get(99)


def test_canonical_json():
    assert encode_json({"a": 1}, A) == b'{"a":1}'
    s = Schema(4, (("s", STRING), ("b", BOOL)))
    assert encode_json({"b": True, "s": "x"}, s) == b'{"s":"x","b":true}'


def _views(n=300, seed=3):
    return generate(WorkloadConfig(seed=seed, views=n, engagement_rate=0.1)).views()


def test_view_json_parses_with_stdlib_and_matches_fields():
    for v in _views(200):
        rec = view_to_record(v)
        parsed = json.loads(encode_json(rec, VIEW_SCHEMA).decode("utf-8"))
        assert list(parsed) == list(VIEW_SCHEMA.names)
        for k, val in rec.items():
            assert parsed[k] == (list(val) if isinstance(val, tuple) else val)


def test_binary_never_larger_than_json():
    for v in _views(300):
        rec = view_to_record(v)
        assert len(encode_binary(rec, VIEW_SCHEMA)) <= len(encode_json(rec, VIEW_SCHEMA))


def test_view_record_round_trip():
    for v in _views(300):
        rec = view_to_record(v)
        back = decode_binary(encode_binary(rec, VIEW_SCHEMA), VIEW_SCHEMA)
        assert record_to_view(back) == v


_scalar = st.one_of(
    st.tuples(st.just(INT64), st.integers(-(2**63), 2**63 - 1)),
    st.tuples(st.just(FLOAT64), st.floats(allow_nan=False)),
    st.tuples(st.just(STRING), st.text(max_size=20)),
    st.tuples(st.just(BOOL), st.booleans()),
    st.tuples(st.just(BYTES), st.binary(max_size=20)),
)


@st.composite
def _schema_and_record(draw):
    n = draw(st.integers(1, 6))
    fields, rec = [], {}
    for i in range(n):
        kind, value = draw(_scalar)
        wrap = draw(st.sampled_from(["plain", "array", "optional"]))
        if wrap == "array":
            kind, value = array_of(kind), [value] * draw(st.integers(0, 3))
        elif wrap == "optional":
            kind, value = optional_of(kind), draw(st.one_of(st.none(), st.just(value)))
        fields.append((f"f{i}", kind))
        rec[f"f{i}"] = value
    return Schema(9, tuple(fields)), rec


@settings(max_examples=300, deadline=None)
@given(_schema_and_record())
def test_binary_round_trip_property(pair):
    schema, rec = pair
    back = decode_binary(encode_binary(rec, schema), schema)
    assert {k: list(v) if isinstance(v, tuple) else v for k, v in back.items()} == rec


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_decode_binary_fuzz_only_raises_decode_errors(data):
    try:
        decode_binary(data, VIEW_SCHEMA)
    except DecodeError:
        pass


# -- lz4 -----------------------------------------------------------------------

VECTORS = [
    # (input, block produced by the reference lz4 library)
    (b"abcd" * 16, "4f61626364040024506461626364"),
    (b"hello hello hello hello world", "6e68656c6c6f20060050776f726c64"),
    (bytes(range(32)) * 3, "ff11000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f200028501b1c1d1e1f"),
    (b"a" * 100, "1f6101004b506161616161"),
]


@pytest.mark.parametrize("raw,block", VECTORS)
def test_reference_vectors_decompress(raw, block):
    assert lz4_decompress(bytes.fromhex(block), len(raw)) == raw


def test_empty_input():
    assert lz4_decompress(lz4_compress(b""), 0) == b""


def test_random_input_bounded_expansion():
    data = os.urandom(64)
    out = lz4_compress(data)
    assert len(data) <= len(out) <= len(data) + len(data) // 255 + 16
    assert len(out) <= max_compressed_size(len(data))


def test_repetitive_input_small_and_interoperable():
    data = b"abcd" * 1024
    out = lz4_compress(data)
    assert len(out) < 64
    assert lz4.block.decompress(out, uncompressed_size=len(data)) == data


def test_zero_offset_is_corrupt():
    # literal 'a', then a match with offset 0
    with pytest.raises(CorruptBlock):
        lz4_decompress(b"\x10a\x00\x00", 20)


def test_offset_beyond_output_is_corrupt():
    with pytest.raises(CorruptBlock):
        lz4_decompress(b"\x10a\x05\x00" + b"\x50hello", 30)


def test_length_mismatch_is_corrupt():
    block = lz4_compress(b"hello world")
    with pytest.raises(CorruptBlock):
        lz4_decompress(block, 5)
    with pytest.raises(CorruptBlock):
        lz4_decompress(block, 50)


def _mixed_inputs(rng: random.Random, n: int):
    for i in range(n):
        kind = i % 3
        size = rng.randint(0, 3000)
        if kind == 0:
            yield rng.randbytes(size)
        elif kind == 1:
            unit = rng.randbytes(rng.randint(1, 8))
            yield (unit * (size // len(unit) + 1))[:size]
        else:
            parts = []
            while sum(map(len, parts)) < size:
                parts.append(rng.randbytes(rng.randint(1, 40)) if rng.random() < 0.5 else rng.choice([b"the ", b"quick ", b"fox "]) * rng.randint(1, 9))
            yield b"".join(parts)[:size]


def test_interop_both_directions_sample():
    for data in _mixed_inputs(random.Random(5), 200):
        ours = lz4_compress(data)
        assert lz4.block.decompress(ours, uncompressed_size=len(data)) == data
        theirs = lz4.block.compress(data, store_size=False)
        assert lz4_decompress(theirs, len(data)) == data


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=2000))
def test_lz4_round_trip_property(data):
    assert lz4_decompress(lz4_compress(data), len(data)) == data


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64), st.integers(0, 200))
def test_lz4_decompress_fuzz_only_raises_corrupt_block(data, n):
    try:
        out = lz4_decompress(data, n)
        assert len(out) == n
    except CorruptBlock:
        pass


# -- frames ---------------------------------------------------------------------


def test_frame_layout():
    f = Frame(0x0102, 0, 3, b"abc")
    assert encode_frame(f) == b"\xec\x01\x01\x02\x00\x03abc"
    assert decode_frame(encode_frame(f)) == f


def test_frame_compressed_flag():
    data = pack_record({"a": 7}, A, compress=True)
    assert decode_frame(data).flags == 0  # one byte never compresses
    rec = {"s": "z" * 200}
    s = Schema(5, (("s", STRING),))
    fr = decode_frame(pack_record(rec, s, compress=True))
    assert fr.flags & FLAG_LZ4 and fr.uncompressed_len == 202  # 2-byte length varint + 200
    assert unpack_record(pack_record(rec, s), SchemaRegistry([s])) == (s, rec)


def test_frame_errors():
    with pytest.raises(TruncatedInput):
        decode_frame(b"\xec\x01")
    with pytest.raises(DecodeError):
        decode_frame(b"\x00\x00\x00\x01\x00\x00")
    with pytest.raises(DecodeError):
        decode_frame(b"\xec\x01\x00\x01\x00\x05ab")


def test_reduction_arithmetic():
    assert reduction_ratio(50, 100) == 0.5
    with pytest.raises(InvalidArgument):
        measure_reduction([], A)
    with pytest.raises(InvalidArgument):
        size_report([], A)


def test_frame_never_much_larger_than_binary():
    views = _views(200)
    corpus = [view_to_record(v) for v in views]
    rep = size_report(corpus, VIEW_SCHEMA)
    # compression is never forced: at most the framing header on top of the body
    assert rep.frame_bytes <= rep.binary_bytes + rep.records * 8
    assert rep.frame_bytes <= rep.frame_uncompressed_bytes


def test_event_and_sample_round_trip():
    v = ViewEvent("v1", "u1", "p1", 1000, (("feed_position", 3),))
    e = EngagementEvent("e1", "u1", "p1", SignalKind.SHARE, 1100)
    for compress in (False, True):
        assert unpack_event(pack_event(v, compress)) == v
        assert unpack_event(pack_event(e, compress)) == e
    for v in _views(50):
        s = make_sample(v, [SignalKind.LIKE, SignalKind.SKIP], v.event_time + 300_000)
        assert unpack_sample(pack_sample(s)) == s
        light = unpack_sample(pack_sample(s), payload=False)
        assert light.sample_id == s.sample_id and light.labels == s.labels and light.emit_time == s.emit_time
    assert SAMPLE_SCHEMA.schema_id in REGISTRY
