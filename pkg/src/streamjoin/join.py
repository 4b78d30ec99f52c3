"""View x engagement join in event time, the processing-time baseline, and tumbling windows.

The streaming join is keyed by ``(user_id, post_id)``. An engagement belongs
to the latest view of its key (by event time, then view id) whose event time
lies in ``[engagement_time - window, engagement_time]``. Views wait in state
until the watermark passes ``view_time + window``; then they are emitted as
samples. Engagements that arrive before any eligible view are buffered with
a TTL of one window, measured from their own event time.
"""

from __future__ import annotations

import heapq
import itertools
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

from streamjoin.codec.records import decode_view, encode_view
from streamjoin.codec.schema import (
    BYTES,
    INT64,
    STRING,
    Schema,
    array_of,
    decode_binary,
    decode_value,
    encode_binary,
    encode_value,
)
from streamjoin.engine.runtime import Context, KeyedProcessor
from streamjoin.engine.state import INT_CODEC, STRING_TUPLE_CODEC, Codec, StateDescriptor, kind_codec
from streamjoin.errors import InvalidArgument, InvalidConfiguration
from streamjoin.model import (
    EngagementEvent,
    JoinKey,
    LabeledSample,
    SignalKind,
    ViewEvent,
    make_sample,
)

VIEW_SIDE = 0
ENGAGEMENT_SIDE = 1

DROP_AND_COUNT = "drop_and_count"
BEST_EFFORT_ATTACH = "best_effort_attach"
LATE_POLICIES = (DROP_AND_COUNT, BEST_EFFORT_ATTACH)


@dataclass(frozen=True)
class JoinConfig:
    join_window_ms: int = 300_000
    watermark_delay_ms: int = 15_000
    late_policy: str = DROP_AND_COUNT

    def validate(self) -> None:
        if self.join_window_ms < 1:
            raise InvalidConfiguration("join_window_ms must be >= 1")
        if self.watermark_delay_ms < 0:
            raise InvalidConfiguration("watermark_delay_ms must be >= 0")
        if self.late_policy not in LATE_POLICIES:
            raise InvalidConfiguration(f"late_policy must be one of {LATE_POLICIES}, got {self.late_policy!r}")


class Attached(NamedTuple):
    engagement_id: str
    signal: SignalKind
    event_time: int


class PendingView:
    """A view waiting for its window to close, with the engagements it holds."""

    __slots__ = ("view", "engagements", "_view_bytes")

    def __init__(self, view: ViewEvent, engagements: tuple[Attached, ...] = (), view_bytes: bytes | None = None) -> None:
        self.view = view
        self.engagements = engagements
        self._view_bytes = view_bytes

    def with_engagements(self, engagements: tuple[Attached, ...]) -> PendingView:
        return PendingView(self.view, engagements, self._view_bytes)

    def order(self) -> tuple[int, str]:
        return self.view.event_time, self.view.view_id

    def view_bytes(self) -> bytes:
        if self._view_bytes is None:
            self._view_bytes = encode_view(self.view)
        return self._view_bytes


_PENDING_SCHEMA = Schema(
    30,
    (
        ("view", BYTES),
        ("engagement_ids", array_of(STRING)),
        ("signals", array_of(INT64)),
        ("times", array_of(INT64)),
    ),
    name="pending_view",
)


def _encode_pending(pv: PendingView) -> bytes:
    return encode_binary(
        {
            "view": pv.view_bytes(),
            "engagement_ids": [a.engagement_id for a in pv.engagements],
            "signals": [int(a.signal) for a in pv.engagements],
            "times": [a.event_time for a in pv.engagements],
        },
        _PENDING_SCHEMA,
    )


def _decode_pending(data: bytes) -> PendingView:
    rec = decode_binary(data, _PENDING_SCHEMA)
    view = decode_view(rec["view"])
    atts = tuple(
        Attached(i, SignalKind(s), t) for i, s, t in zip(rec["engagement_ids"], rec["signals"], rec["times"])
    )
    return PendingView(view, atts, rec["view"])


PENDING_CODEC = Codec(_encode_pending, _decode_pending)
_PAIR = array_of(INT64)
EARLY_CODEC = Codec(
    lambda v: encode_value(_PAIR, [int(v[0]), v[1]]),
    lambda b: (lambda p: (SignalKind(p[0]), p[1]))(decode_value(_PAIR, b)),
)


class LateRecord(NamedTuple):
    kind: str  # "view" or "engagement"
    record_id: str
    user_id: str
    post_id: str
    event_time: int
    watermark: int
    action: str  # "dropped" or "joined"


class JoinProcessor(KeyedProcessor):
    """The keyed co-process function joining views (side 0) with engagements (side 1)."""

    key_codec = STRING_TUPLE_CODEC

    def __init__(self, config: JoinConfig, late_log: list[LateRecord] | None = None) -> None:
        config.validate()
        self.config = config
        self.window = config.join_window_ms
        self.late_log = late_log if late_log is not None else []
        w = config.join_window_ms
        self.state_descriptors = (
            StateDescriptor("pending", "map", None, PENDING_CODEC),
            StateDescriptor("early", "map", w, EARLY_CODEC),
        )

    def process_element(self, side: int, element, ctx: Context) -> None:
        if side == VIEW_SIDE:
            self._on_view(element, ctx)
        else:
            self._on_engagement(element, ctx)

    def _late(self, ctx: Context, kind: str, rid: str, ev, action: str) -> None:
        self.late_log.append(LateRecord(kind, rid, ev.user_id, ev.post_id, ev.event_time, ctx.watermark, action))

    def _on_view(self, view: ViewEvent, ctx: Context) -> None:
        ctx.count("views_in")
        pending = ctx.map_state("pending")
        if pending.contains(view.view_id):
            ctx.count("duplicate_views")
            return
        w = self.window
        if ctx.late:
            if view.event_time + w < ctx.watermark:
                # its window has already closed
                ctx.count("late_dropped_views")
                self._late(ctx, "view", view.view_id, view, "dropped")
                return
            ctx.count("late_views_joined")
            self._late(ctx, "view", view.view_id, view, "joined")
        lo, hi = view.event_time, view.event_time + w
        mine = (view.event_time, view.view_id)
        taken: list[Attached] = []
        # take over engagements held by older views when this view is a later eligible one
        for vid, pv in list(pending.items()):
            if pv.order() >= mine:
                continue
            keep = []
            for a in pv.engagements:
                if lo <= a.event_time <= hi:
                    taken.append(a)
                else:
                    keep.append(a)
            if len(keep) != len(pv.engagements):
                pending.put(vid, pv.with_engagements(tuple(keep)), ts=pv.view.event_time)
        early = ctx.map_state("early")
        for eid, (signal, t) in early.items():
            if lo <= t <= hi:
                taken.append(Attached(eid, signal, t))
                early.remove(eid)
        taken.sort(key=lambda a: a.engagement_id)
        pending.put(view.view_id, PendingView(view, tuple(taken)), ts=view.event_time)
        ctx.register_timer(hi)

    def _latest_eligible(self, pending, t: int) -> tuple[str, PendingView] | None:
        best = None
        for vid, pv in pending.items():
            vt = pv.view.event_time
            if vt <= t <= vt + self.window and (best is None or pv.order() > best[1].order()):
                best = (vid, pv)
        return best

    def _on_engagement(self, eng: EngagementEvent, ctx: Context) -> None:
        ctx.count("engagements_in")
        pending = ctx.map_state("pending")
        # An engagement held in state is either buffered or attached to a pending view.
        # Once it has left state its event time is below the watermark, so a copy is late.
        eid = eng.engagement_id
        early = ctx.map_state("early")
        if early.contains(eid) or any(a.engagement_id == eid for _, pv in pending.items() for a in pv.engagements):
            ctx.count("duplicate_engagements")
            return
        if ctx.late:
            target = self._latest_eligible(pending, eng.event_time) if self.config.late_policy == BEST_EFFORT_ATTACH else None
            if target is None:
                ctx.count("late_dropped_engagements")
                self._late(ctx, "engagement", eng.engagement_id, eng, "dropped")
                return
            ctx.count("late_engagements_joined")
            self._late(ctx, "engagement", eng.engagement_id, eng, "joined")
        else:
            target = self._latest_eligible(pending, eng.event_time)
        att = Attached(eng.engagement_id, eng.signal, eng.event_time)
        if target is None:
            early.put(eid, (eng.signal, eng.event_time), ts=eng.event_time)
            ctx.register_timer(eng.event_time + self.window)
            return
        vid, pv = target
        pending.put(vid, pv.with_engagements(tuple(sorted(pv.engagements + (att,)))), ts=pv.view.event_time)

    def on_timer(self, fire_time: int, ctx: Context) -> None:
        pending = ctx.map_state("pending")
        w = self.window
        due = sorted((vid, pv) for vid, pv in pending.items() if pv.view.event_time + w == fire_time)
        for vid, pv in due:
            pending.remove(vid)
            ctx.count("attached_engagements", len(pv.engagements))
            ctx.count("samples_emitted")
            ctx.emit(make_sample(pv.view, (a.signal for a in pv.engagements), fire_time))
        expired = ctx.map_state("early").pop_expired()
        if expired:
            ctx.count("expired_engagements", len(expired))

    def snapshot_extra(self) -> bytes:
        return encode_value(INT64, len(self.late_log))

    def restore_extra(self, data: bytes) -> None:
        if data:
            del self.late_log[decode_value(INT64, data) :]


def engagement_conservation(metrics: dict[str, int]) -> tuple[int, int]:
    """(inputs, accounted) where accounted = attached + expired + late-dropped + duplicates."""
    accounted = sum(
        metrics.get(k, 0)
        for k in ("attached_engagements", "expired_engagements", "late_dropped_engagements", "duplicate_engagements")
    )
    return metrics.get("engagements_in", 0), accounted


# -- tumbling windows ----------------------------------------------------------------


def assign_tumbling_window(t: int, size_ms: int) -> int:
    """Index ``i`` of the window ``[i*size, (i+1)*size)`` containing ``t``."""
    if size_ms < 1:
        raise InvalidArgument("window size must be >= 1")
    return t // size_ms


class WindowCount(NamedTuple):
    window: int
    start: int
    end: int
    count: int
    event_ids: tuple[str, ...]


class TumblingWindowCounter(KeyedProcessor):
    """Counts events per event-time window; events whose window already closed are missed."""

    key_codec = INT_CODEC

    def __init__(self, size_ms: int, missed: list[str] | None = None) -> None:
        if size_ms < 1:
            raise InvalidArgument("window size must be >= 1")
        self.size = size_ms
        self.missed = missed if missed is not None else []
        self.state_descriptors = (StateDescriptor("ids", "value", None, kind_codec(array_of(STRING))),)

    def process_element(self, side: int, element, ctx: Context) -> None:
        w = ctx.key
        end = (w + 1) * self.size
        if end - 1 < ctx.watermark:
            ctx.count("missed")
            self.missed.append(_event_id(element))
            return
        ids = ctx.value_state("ids")
        ids.set(list(ids.get([])) + [_event_id(element)])
        ctx.register_timer(end - 1)

    def on_timer(self, fire_time: int, ctx: Context) -> None:
        w = ctx.key
        ids = tuple(ctx.value_state("ids").get([]))
        ctx.value_state("ids").clear()
        ctx.emit(WindowCount(w, w * self.size, (w + 1) * self.size, len(ids), ids))


def _event_id(ev) -> str:
    return ev.view_id if isinstance(ev, ViewEvent) else ev.engagement_id


# -- processing-time baseline ----------------------------------------------------------


def baseline_join(
    records: Iterable,
    window_ms: int,
    delay_ms: int,
    cache_ttl_ms: int,
) -> list[LabeledSample]:
    """Hold each view for ``delay_ms`` of processing time, then join it against a TTL cache.

    Engagements enter the cache when they arrive and stay ``cache_ttl_ms``.
    When a held view is released it collects cached engagements of its key
    with event time in ``[view_time, view_time + window]`` for which it is
    the latest view seen so far. ``emit_time`` is the release time.
    ``records`` are ``(arrival_time, event)`` pairs in arrival order.
    """
    if window_ms < 1:
        raise InvalidConfiguration("window_ms must be >= 1")
    if delay_ms < 0:
        raise InvalidConfiguration("delay_ms must be >= 0")
    if cache_ttl_ms <= delay_ms:
        raise InvalidConfiguration("cache TTL must be longer than the view delay")

    cache: dict[JoinKey, dict[str, tuple[int, EngagementEvent]]] = defaultdict(dict)
    views_seen: dict[JoinKey, list[tuple[int, ViewEvent]]] = defaultdict(list)
    view_ids: set[str] = set()
    held: list[tuple[int, int, ViewEvent]] = []
    seq = itertools.count()
    out: list[LabeledSample] = []

    def release(until: int | None) -> None:
        while held and (until is None or held[0][0] < until):
            at, _, v = heapq.heappop(held)
            key = JoinKey(v.user_id, v.post_id)
            known = [u for arrived, u in views_seen[key] if at - arrived < cache_ttl_ms]
            signals = set()
            for inserted, e in cache[key].values():
                if at - inserted >= cache_ttl_ms:
                    continue
                t = e.event_time
                if not v.event_time <= t <= v.event_time + window_ms:
                    continue
                latest = max((u for u in known if u.event_time <= t <= u.event_time + window_ms), key=lambda u: (u.event_time, u.view_id))
                if latest.view_id == v.view_id:
                    signals.add(e.signal)
            out.append(make_sample(v, signals, at))

    for arrival, ev in records:
        release(arrival)
        key = JoinKey.of(ev)
        if isinstance(ev, ViewEvent):
            if ev.view_id in view_ids:
                continue
            view_ids.add(ev.view_id)
            views_seen[key].append((arrival, ev))
            heapq.heappush(held, (arrival + delay_ms, next(seq), ev))
        else:
            cache[key].setdefault(ev.engagement_id, (arrival, ev))
    release(None)
    return out


def sample_multiset(samples: Iterable[LabeledSample], normalize: Callable[[LabeledSample], tuple] | None = None) -> dict:
    """Multiset of samples as ``{(sample_id, bits, view_time, emit_time): count}``."""
    counts: dict = defaultdict(int)
    for s in samples:
        k = normalize(s) if normalize else (s.sample_id, s.labels.bits(), s.view.event_time, s.emit_time)
        counts[k] += 1
    return dict(counts)
