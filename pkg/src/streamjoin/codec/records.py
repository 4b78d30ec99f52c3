"""Wire schemas for the domain types and conversions to and from records."""

from __future__ import annotations

from typing import Any

from streamjoin.codec.frame import decode_frame, pack_body, pack_record, unpack_record
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
    optional_of,
)
from streamjoin.errors import DecodeError, SchemaViolation
from streamjoin.model import (
    EngagementEvent,
    Event,
    LabeledSample,
    LabelVector,
    SignalKind,
    ViewEvent,
)

# Client-side view context, the kind of fields a feed app logs per impression.
PAYLOAD_FIELDS = (
    ("client_app_version", STRING),
    ("client_platform", STRING),
    ("device_model", STRING),
    ("network_type", STRING),
    ("content_language", STRING),
    ("feed_type", STRING),
    ("feed_position", INT64),
    ("session_id", STRING),
    ("watch_duration_ms", INT64),
    ("video_duration_ms", INT64),
    ("is_autoplay", BOOL),
    ("is_muted", BOOL),
    ("is_first_view", BOOL),
    ("ranking_score", FLOAT64),
    ("candidate_source", STRING),
    ("tag_ids", array_of(INT64)),
    ("referrer_post_id", STRING),
    ("client_ts_ms", INT64),
    ("server_ts_ms", INT64),
    ("app_build", INT64),
    ("screen_width_px", INT64),
    ("screen_height_px", INT64),
    ("bitrate_kbps", INT64),
    ("buffering_ms", INT64),
    ("creator_id", STRING),
)
PAYLOAD_NAMES = tuple(n for n, _ in PAYLOAD_FIELDS)
_PAYLOAD_WIRE = tuple((n, optional_of(k)) for n, k in PAYLOAD_FIELDS)

VIEW_SCHEMA = Schema(
    1,
    (
        ("view_id", STRING),
        ("user_id", STRING),
        ("post_id", STRING),
        ("event_time", INT64),
        *_PAYLOAD_WIRE,
    ),
    name="view",
)

ENGAGEMENT_SCHEMA = Schema(
    2,
    (
        ("engagement_id", STRING),
        ("user_id", STRING),
        ("post_id", STRING),
        ("signal", INT64),
        ("event_time", INT64),
    ),
    name="engagement",
)

# The view travels as its own binary record so the sink can skip the payload.
SAMPLE_SCHEMA = Schema(
    3,
    (
        ("sample_id", STRING),
        ("view_id", STRING),
        ("user_id", STRING),
        ("post_id", STRING),
        ("view_event_time", INT64),
        ("labels", INT64),
        ("emit_time", INT64),
        ("view", BYTES),
    ),
    name="sample",
)

TRACE_KIND_VIEW = 0
TRACE_KIND_ENGAGEMENT = 1

TRACE_SCHEMA = Schema(
    4,
    (
        ("arrival_time", INT64),
        ("kind", INT64),
        ("body", BYTES),
    ),
    name="trace_entry",
)

REGISTRY = SchemaRegistry([VIEW_SCHEMA, ENGAGEMENT_SCHEMA, SAMPLE_SCHEMA, TRACE_SCHEMA])


def _payload_into(rec: dict[str, Any], payload) -> None:
    for name in PAYLOAD_NAMES:
        rec[name] = None
    for name, value in payload:
        if name not in rec or name in ("view_id", "user_id", "post_id", "event_time"):
            raise SchemaViolation(f"unknown payload field {name!r}")
        rec[name] = value


def _payload_from(rec: dict[str, Any]) -> tuple:
    out = []
    for name in PAYLOAD_NAMES:
        v = rec[name]
        if v is not None:
            out.append((name, tuple(v) if isinstance(v, list) else v))
    return tuple(out)


def view_to_record(view: ViewEvent) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "view_id": view.view_id,
        "user_id": view.user_id,
        "post_id": view.post_id,
        "event_time": view.event_time,
    }
    _payload_into(rec, view.payload)
    return rec


def record_to_view(rec: dict[str, Any]) -> ViewEvent:
    return ViewEvent(rec["view_id"], rec["user_id"], rec["post_id"], rec["event_time"], _payload_from(rec))


# Equal views always encode to the same bytes, so encodings can be shared by value.
_WIRE_CACHE_LIMIT = 1 << 17
_view_wire: dict[ViewEvent, bytes] = {}


def _remember(view: ViewEvent, body: bytes) -> None:
    if len(_view_wire) >= _WIRE_CACHE_LIMIT:
        _view_wire.clear()
    _view_wire[view] = body


def encode_view(view: ViewEvent) -> bytes:
    """Binary ``VIEW_SCHEMA`` record of ``view``."""
    body = _view_wire.get(view)
    if body is None:
        body = encode_binary(view_to_record(view), VIEW_SCHEMA)
        _remember(view, body)
    return body


def decode_view(body: bytes) -> ViewEvent:
    view = record_to_view(decode_binary(body, VIEW_SCHEMA))
    _remember(view, bytes(body))
    return view


def engagement_to_record(eng: EngagementEvent) -> dict[str, Any]:
    return {
        "engagement_id": eng.engagement_id,
        "user_id": eng.user_id,
        "post_id": eng.post_id,
        "signal": int(eng.signal),
        "event_time": eng.event_time,
    }


def record_to_engagement(rec: dict[str, Any]) -> EngagementEvent:
    try:
        signal = SignalKind(rec["signal"])
    except ValueError:
        raise DecodeError(f"unknown signal code {rec['signal']}") from None
    return EngagementEvent(rec["engagement_id"], rec["user_id"], rec["post_id"], signal, rec["event_time"])


def sample_to_record(sample: LabeledSample) -> dict[str, Any]:
    v = sample.view
    return {
        "sample_id": sample.sample_id,
        "view_id": v.view_id,
        "user_id": v.user_id,
        "post_id": v.post_id,
        "view_event_time": v.event_time,
        "labels": sample.labels.mask,
        "emit_time": sample.emit_time,
        "view": encode_view(v),
    }


def record_to_sample(rec: dict[str, Any], payload: bool = True) -> LabeledSample:
    """With ``payload=False`` the embedded view record is not parsed and the view has no payload."""
    if payload:
        view = decode_view(rec["view"])
        if (view.view_id, view.user_id, view.post_id, view.event_time) != (
            rec["view_id"],
            rec["user_id"],
            rec["post_id"],
            rec["view_event_time"],
        ):
            raise DecodeError(f"sample {rec['sample_id']} disagrees with its embedded view")
    else:
        view = ViewEvent(rec["view_id"], rec["user_id"], rec["post_id"], rec["view_event_time"])
    try:
        labels = LabelVector.from_mask(rec["labels"])
    except ValueError:
        raise DecodeError(f"bad label mask {rec['labels']}") from None
    return LabeledSample(rec["sample_id"], view, labels, rec["emit_time"])


def pack_event(event: Event, compress: bool = True) -> bytes:
    if isinstance(event, ViewEvent):
        return pack_body(encode_view(event), VIEW_SCHEMA, compress)
    return pack_record(engagement_to_record(event), ENGAGEMENT_SCHEMA, compress)


def unpack_event(data: bytes) -> Event:
    frame = decode_frame(data)
    schema = REGISTRY.get(frame.schema_id)
    if schema is VIEW_SCHEMA:
        return decode_view(frame.body())
    if schema is ENGAGEMENT_SCHEMA:
        return record_to_engagement(decode_binary(frame.body(), ENGAGEMENT_SCHEMA))
    raise DecodeError(f"frame with schema {schema.name!r} is not an event")


def pack_sample(sample: LabeledSample, compress: bool = True) -> bytes:
    return pack_record(sample_to_record(sample), SAMPLE_SCHEMA, compress)


def unpack_sample(data: bytes, payload: bool = True) -> LabeledSample:
    schema, rec = unpack_record(data, REGISTRY)
    if schema is not SAMPLE_SCHEMA:
        raise DecodeError(f"frame with schema {schema.name!r} is not a sample")
    return record_to_sample(rec, payload)
