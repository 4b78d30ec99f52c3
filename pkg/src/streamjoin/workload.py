"""Seeded synthetic traffic and the offline brute-force join oracle."""

from __future__ import annotations

import bisect
import itertools
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

from streamjoin.codec.frame import pack_record, unpack_record
from streamjoin.codec.records import (
    ENGAGEMENT_SCHEMA,
    REGISTRY,
    TRACE_KIND_ENGAGEMENT,
    TRACE_KIND_VIEW,
    TRACE_SCHEMA,
    VIEW_SCHEMA,
    engagement_to_record,
    record_to_engagement,
    record_to_view,
    view_to_record,
)
from streamjoin.codec.schema import decode_binary, encode_binary, read_uvarint, uvarint
from streamjoin.errors import DecodeError, InputError, InvalidArgument
from streamjoin.model import (
    EngagementEvent,
    Event,
    JoinKey,
    LabeledSample,
    SignalKind,
    ViewEvent,
    make_sample,
)

DEFAULT_START_MS = 1_700_000_000_000


@dataclass(frozen=True)
class Lateness:
    """Delay between an event happening and it reaching the queue."""

    kind: str = "none"
    max_ms: int = 0
    mu: float = math.log(2000.0)
    sigma: float = 1.0
    cap_ms: int = 120_000

    @classmethod
    def none(cls) -> Lateness:
        return cls("none")

    @classmethod
    def uniform(cls, max_ms: int) -> Lateness:
        return cls("uniform", max_ms=max_ms)

    @classmethod
    def lognormal(cls, mu: float = math.log(2000.0), sigma: float = 1.0, cap_ms: int = 120_000) -> Lateness:
        return cls("lognormal", mu=mu, sigma=sigma, cap_ms=cap_ms)

    def validate(self) -> None:
        if self.kind not in ("none", "uniform", "lognormal"):
            raise InvalidArgument(f"unknown lateness model {self.kind!r}")
        if self.max_ms < 0 or self.cap_ms < 0 or self.sigma < 0:
            raise InvalidArgument("lateness parameters must be non-negative")

    @property
    def bound_ms(self) -> int:
        """Largest lateness this model can produce."""
        return {"none": 0, "uniform": self.max_ms, "lognormal": self.cap_ms}[self.kind]

    def sample(self, rng: random.Random) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "uniform":
            return rng.randint(0, self.max_ms)
        return min(self.cap_ms, int(round(rng.lognormvariate(self.mu, self.sigma))))


@dataclass(frozen=True)
class Spike:
    start_ms: int
    duration_ms: int
    multiplier: float

    def active(self, offset_ms: float) -> bool:
        return self.start_ms <= offset_ms < self.start_ms + self.duration_ms


@dataclass(frozen=True)
class WorkloadConfig:
    seed: int = 1
    users: int = 1000
    posts: int = 5000
    views: int = 10_000
    engagement_rate: float = 0.05
    lateness: Lateness = field(default_factory=Lateness.lognormal)
    duplicate_prob: float = 0.0
    spike: Spike | None = None
    view_rate_per_s: float = 50.0
    engagement_window_ms: int = 60_000
    duplicate_delay_max_ms: int = 30_000
    start_ms: int = DEFAULT_START_MS
    user_skew: float = 1.05
    post_skew: float = 0.8
    payload: bool = True

    def validate(self) -> None:
        for name in ("engagement_rate", "duplicate_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidArgument(f"{name} must be a probability, got {p}")
        for name in ("users", "posts", "views"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.view_rate_per_s <= 0:
            raise InvalidArgument("view_rate_per_s must be positive")
        if self.engagement_window_ms < 0 or self.duplicate_delay_max_ms < 0 or self.start_ms < 0:
            raise InvalidArgument("time parameters must be non-negative")
        if self.spike is not None and (self.spike.multiplier <= 0 or self.spike.duration_ms < 0):
            raise InvalidArgument("spike multiplier must be positive")
        self.lateness.validate()


# The codec benchmark corpus: generator defaults, seed 1, 10^5 views.
STANDARD_CORPUS = WorkloadConfig(seed=1, views=100_000)


class TraceRecord(NamedTuple):
    arrival_time: int
    event: Event


@dataclass
class GeneratedTrace:
    records: list[TraceRecord]
    config: WorkloadConfig | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def views(self) -> list[ViewEvent]:
        return [r.event for r in self.records if isinstance(r.event, ViewEvent)]

    def engagements(self) -> list[EngagementEvent]:
        return [r.event for r in self.records if isinstance(r.event, EngagementEvent)]

    def filter_users(self, keep) -> GeneratedTrace:
        return GeneratedTrace([r for r in self.records if keep(r.event.user_id)], self.config)


def _zipf_cum_weights(n: int, s: float) -> list[float]:
    return list(itertools.accumulate(1.0 / (i + 1) ** s for i in range(n)))


class _Picker:
    def __init__(self, n: int, skew: float) -> None:
        self.cw = _zipf_cum_weights(n, skew)
        self.total = self.cw[-1]
        self.n = n

    def __call__(self, rng: random.Random) -> int:
        return min(bisect.bisect_right(self.cw, rng.random() * self.total), self.n - 1)


_PLATFORMS = ("android", "android", "android", "ios", "web")
_DEVICES = ("SM-A515F", "Redmi Note 10", "vivo 1904", "RMX2185", "iPhone13,2", "CPH2239", "moto g(40)")
_VERSIONS = ("2024.11.3", "2024.10.1", "2024.12.0", "2025.1.2")
_NETWORKS = ("wifi", "4g", "4g", "5g", "3g")
_LANGUAGES = (
    "hindi", "bengali", "telugu", "marathi", "tamil", "urdu", "gujarati", "kannada", "odia",
    "malayalam", "punjabi", "assamese", "bhojpuri", "haryanvi", "rajasthani", "english",
    "chhattisgarhi", "sindhi",
)  # fmt: skip
_FEEDS = ("video_feed", "trending", "following", "search_results", "creator_profile")
_SCREENS = ((720, 1600), (1080, 2400), (1080, 2340), (720, 1520), (1170, 2532))
_BITRATES = (400, 800, 1200, 2500, 4000)
_SOURCES = ("collaborative_filtering", "trending_pool", "fresh_content", "followed_creator", "similar_language")


def _user_profiles(rng: random.Random, users: int) -> list[tuple[str, str, str, str]]:
    return [
        (rng.choice(_VERSIONS), rng.choice(_PLATFORMS), rng.choice(_DEVICES), rng.choice(_LANGUAGES))
        for _ in range(users)
    ]


def generate(config: WorkloadConfig) -> GeneratedTrace:
    """Deterministic trace for ``config``: same config, identical records."""
    config.validate()
    rng = random.Random(config.seed)
    pick_user = _Picker(config.users, config.user_skew)
    pick_post = _Picker(config.posts, config.post_skew)
    profiles = _user_profiles(rng, config.users) if config.payload else []
    video_len = [rng.randint(5_000, 90_000) for _ in range(config.posts)] if config.payload else []
    sessions: dict[int, str] = {}

    out: list[tuple[int, int, Event]] = []  # (arrival, seq, event)
    seq = itertools.count()
    clock = float(config.start_ms)
    signals = list(SignalKind)
    window = config.engagement_window_ms

    def emit(event: Event) -> None:
        arrival = event.event_time + config.lateness.sample(rng)
        out.append((arrival, next(seq), event))
        if config.duplicate_prob and rng.random() < config.duplicate_prob:
            out.append((arrival + rng.randint(1, max(1, config.duplicate_delay_max_ms)), next(seq), event))

    for i in range(config.views):
        rate = config.view_rate_per_s
        if config.spike is not None and config.spike.active(clock - config.start_ms):
            rate *= config.spike.multiplier
        clock += rng.expovariate(rate / 1000.0)
        t = int(clock)
        u = pick_user(rng)
        p = pick_post(rng)
        user_id = f"u{u:06d}"
        post_id = f"p{p:07d}"
        payload: tuple = ()
        if config.payload:
            if u not in sessions or rng.random() < 0.05:
                sessions[u] = format(rng.getrandbits(64), "016x")
            version, platform, device, lang = profiles[u]
            fields = [
                ("client_app_version", version),
                ("client_platform", platform),
                ("device_model", device),
                ("network_type", rng.choice(_NETWORKS)),
                ("content_language", lang),
                ("feed_type", rng.choice(_FEEDS)),
                ("feed_position", rng.randint(0, 200)),
                ("session_id", sessions[u]),
                ("watch_duration_ms", min(video_len[p], int(rng.expovariate(1 / 8000.0)))),
                ("video_duration_ms", video_len[p]),
                ("is_autoplay", rng.random() < 0.7),
                ("is_muted", rng.random() < 0.2),
                ("is_first_view", rng.random() < 0.8),
                ("ranking_score", rng.random()),
                ("candidate_source", rng.choice(_SOURCES)),
                ("tag_ids", tuple(rng.randrange(5000) for _ in range(rng.randint(0, 5)))),
            ]
            if rng.random() < 0.3:
                fields.append(("referrer_post_id", f"p{pick_post(rng):07d}"))
            width, height = _SCREENS[u % len(_SCREENS)]
            fields += [
                ("client_ts_ms", t - rng.randint(0, 400)),
                ("server_ts_ms", t + rng.randint(20, 900)),
                ("app_build", 24_000 + _VERSIONS.index(version) * 37),
                ("screen_width_px", width),
                ("screen_height_px", height),
                ("bitrate_kbps", rng.choice(_BITRATES)),
                ("buffering_ms", int(rng.expovariate(1 / 150.0))),
                ("creator_id", f"c{p % 1500:06d}"),
            ]
            payload = tuple(fields)
        view = ViewEvent(f"v{i:07d}", user_id, post_id, t, payload)
        emit(view)
        for s in signals:
            if rng.random() < config.engagement_rate:
                et = t + rng.randint(0, window)
                emit(EngagementEvent(f"e{i:07d}.{int(s)}", user_id, post_id, s, et))

    out.sort(key=lambda r: (r[0], r[1]))
    return GeneratedTrace([TraceRecord(a, e) for a, _, e in out], config)


def oracle_join(trace: Iterable[TraceRecord] | Iterable[Event], window_ms: int) -> list[LabeledSample]:
    """Ground truth by brute force over every (view, engagement) pair of a join key.

    An engagement attaches to the latest view (by event time, then view id)
    whose event time lies in ``[engagement_time - window, engagement_time]``.
    Duplicate ids are collapsed; arrival order is ignored.
    """
    views: dict[str, ViewEvent] = {}
    engagements: dict[str, EngagementEvent] = {}
    for item in trace:
        ev = item.event if isinstance(item, TraceRecord) else item
        if isinstance(ev, ViewEvent):
            views.setdefault(ev.view_id, ev)
        else:
            engagements.setdefault(ev.engagement_id, ev)

    by_key: dict[JoinKey, list[ViewEvent]] = defaultdict(list)
    for v in views.values():
        by_key[JoinKey(v.user_id, v.post_id)].append(v)

    signals: dict[str, set[SignalKind]] = {vid: set() for vid in views}
    for e in engagements.values():
        best = None
        for v in by_key.get(JoinKey(e.user_id, e.post_id), ()):
            if v.event_time <= e.event_time <= v.event_time + window_ms:
                if best is None or (v.event_time, v.view_id) > (best.event_time, best.view_id):
                    best = v
        if best is not None:
            signals[best.view_id].add(e.signal)

    return [make_sample(v, signals[v.view_id], v.event_time + window_ms) for v in views.values()]


def late_window_trace(start_ms: int = 0) -> GeneratedTrace:
    """Seven events over four one-minute windows.

    Event 2 (window 0) reaches the queue after event 3, which lies 6 s past
    the end of window 0. Event 5 (window 2) reaches it after event 6, 2 s
    past the end of window 2. With a watermark delay of at most 2 s both are
    missed, up to 6 s event 2 is still missed, and 15 s keeps both.
    """
    spec = [
        # (event offset, lateness)
        (10_000, 500),
        (55_000, 12_000),  # window 0, arrives at 67s
        (66_000, 200),     # window 1, arrives at 66.2s
        (130_000, 300),
        (178_000, 9_000),  # window 2, arrives at 187s
        (182_000, 600),    # window 3, arrives at 182.6s
        (200_000, 600),
    ]  # fmt: skip
    recs = []
    for i, (off, late) in enumerate(spec, start=1):
        v = ViewEvent(f"ev{i}", "u1", f"p{i}", start_ms + off)
        recs.append(TraceRecord(start_ms + off + late, v))
    recs.sort(key=lambda r: r.arrival_time)
    return GeneratedTrace(recs)


# -- trace files --------------------------------------------------------------


def _trace_entry(rec: TraceRecord) -> dict:
    ev = rec.event
    if isinstance(ev, ViewEvent):
        return {"arrival_time": rec.arrival_time, "kind": TRACE_KIND_VIEW, "body": encode_binary(view_to_record(ev), VIEW_SCHEMA)}
    return {
        "arrival_time": rec.arrival_time,
        "kind": TRACE_KIND_ENGAGEMENT,
        "body": encode_binary(engagement_to_record(ev), ENGAGEMENT_SCHEMA),
    }


def write_trace(path: str | Path, trace: Iterable[TraceRecord], compress: bool = True) -> int:
    """Write ``[uvarint length][frame]`` entries; returns the number of records."""
    count = 0
    with open(path, "wb") as fh:
        for rec in trace:
            frame = pack_record(_trace_entry(rec), TRACE_SCHEMA, compress)
            fh.write(uvarint(len(frame)))
            fh.write(frame)
            count += 1
    return count


def read_trace(path: str | Path) -> GeneratedTrace:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read trace {path}: {exc}") from exc
    pos = 0
    out: list[TraceRecord] = []
    try:
        while pos < len(data):
            n, pos = read_uvarint(data, pos)
            if pos + n > len(data):
                raise InputError(f"trace truncated at byte {pos}")
            schema, entry = unpack_record(data[pos : pos + n], REGISTRY)
            pos += n
            if schema is not TRACE_SCHEMA:
                raise InputError(f"unexpected schema {schema.name!r} in trace file")
            if entry["kind"] == TRACE_KIND_VIEW:
                ev: Event = record_to_view(decode_binary(entry["body"], VIEW_SCHEMA))
            elif entry["kind"] == TRACE_KIND_ENGAGEMENT:
                ev = record_to_engagement(decode_binary(entry["body"], ENGAGEMENT_SCHEMA))
            else:
                raise InputError(f"unknown trace entry kind {entry['kind']}")
            out.append(TraceRecord(entry["arrival_time"], ev))
    except DecodeError as exc:
        raise InputError(f"corrupt trace file {path}: {exc}") from exc
    return GeneratedTrace(out)


def view_corpus(trace: Sequence[TraceRecord] | GeneratedTrace) -> list[dict]:
    """Wire records of every distinct view in the trace (the codec benchmark corpus)."""
    seen: set[str] = set()
    out = []
    for rec in trace:
        ev = rec.event
        if isinstance(ev, ViewEvent) and ev.view_id not in seen:
            seen.add(ev.view_id)
            out.append(view_to_record(ev))
    return out
