from streamjoin.codec.frame import (
    FLAG_LZ4,
    Frame,
    SizeReport,
    decode_frame,
    encode_frame,
    measure_reduction,
    pack_body,
    pack_record,
    reduction_ratio,
    size_report,
    unpack_record,
)
from streamjoin.codec.lz4 import lz4_compress, lz4_decompress
from streamjoin.codec.schema import (
    BOOL,
    BYTES,
    FLOAT64,
    INT64,
    STRING,
    FieldKind,
    Schema,
    SchemaRegistry,
    array_of,
    decode_binary,
    decode_value,
    encode_binary,
    encode_json,
    encode_value,
    optional_of,
)

__all__ = [
    "BOOL",
    "BYTES",
    "FLAG_LZ4",
    "FLOAT64",
    "INT64",
    "STRING",
    "FieldKind",
    "Frame",
    "Schema",
    "SchemaRegistry",
    "SizeReport",
    "array_of",
    "decode_binary",
    "decode_frame",
    "decode_value",
    "encode_binary",
    "encode_frame",
    "encode_json",
    "encode_value",
    "lz4_compress",
    "lz4_decompress",
    "measure_reduction",
    "optional_of",
    "pack_body",
    "pack_record",
    "reduction_ratio",
    "size_report",
    "unpack_record",
]
