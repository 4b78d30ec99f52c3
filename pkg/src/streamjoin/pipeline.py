"""End-to-end streaming pipeline: trace -> log topics -> join stage -> samples topic -> sink stage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from streamjoin.codec.records import pack_event, pack_sample, unpack_event, unpack_sample
from streamjoin.engine.checkpoint import CheckpointStore
from streamjoin.engine.runtime import Engine, EngineResult, SourceSpec, StageSpec
from streamjoin.join import (
    ENGAGEMENT_SIDE,
    VIEW_SIDE,
    JoinConfig,
    JoinProcessor,
    LateRecord,
    TumblingWindowCounter,
    WindowCount,
    assign_tumbling_window,
)
from streamjoin.errors import InvalidConfiguration
from streamjoin.logstore import LogStore
from streamjoin.model import LabeledSample, ViewEvent
from streamjoin.sink import ResultRow, SinkProcessor, UpdateRecord, UserEmbedding
from streamjoin.workload import TraceRecord

log = logging.getLogger(__name__)

VIEWS_TOPIC = "views"
ENGAGEMENTS_TOPIC = "engagements"
SAMPLES_TOPIC = "samples"
JOIN_STAGE = "join"
SINK_STAGE = "sink"


@dataclass
class PipelineConfig:
    join: JoinConfig = field(default_factory=JoinConfig)
    partitions: int = 4
    parallelism: int = 2
    retention_ms: int = 7 * 24 * 3600 * 1000
    queue_capacity: int = 1024
    checkpoint_interval_ms: int = 10_000
    lr: float = 0.1
    dedup_ttl_ms: int | None = None  # default: two checkpoint intervals
    join_rate_per_s: float | None = None
    sink_rate_per_s: float | None = None
    sink_pauses: Sequence[tuple[int, int]] = ()  # offsets from the trace start
    compress: bool = False
    tick_ms: int = 1
    max_dead_letters: int = 1000

    def validate(self) -> None:
        self.join.validate()
        if self.partitions < 1 or self.parallelism < 1:
            raise InvalidConfiguration("partitions and parallelism must be >= 1")
        if self.checkpoint_interval_ms < 1:
            raise InvalidConfiguration("checkpoint interval must be >= 1")
        if not 0.0 < self.lr < 1.0:
            raise InvalidConfiguration("lr must be in (0, 1)")
        if self.dedup_ttl_ms is not None and self.dedup_ttl_ms < 1:
            raise InvalidConfiguration("dedup ttl must be >= 1")

    @property
    def effective_dedup_ttl_ms(self) -> int:
        return self.dedup_ttl_ms if self.dedup_ttl_ms is not None else 2 * self.checkpoint_interval_ms


@dataclass
class PipelineResult:
    samples: list[LabeledSample]  # everything published to the samples topic, re-emissions included
    results: list[ResultRow]  # applied samples, lane by lane
    embeddings: dict[str, UserEmbedding]
    updates: list[UpdateRecord]
    late: list[LateRecord]
    engine: EngineResult
    join_metrics: dict[str, int]
    sink_metrics: dict[str, int]
    conservation: dict[str, dict[str, int]]

    def late_dropped(self) -> int:
        m = self.join_metrics
        return m.get("late_dropped_engagements", 0) + m.get("late_dropped_views", 0)


def load_trace(store: LogStore, trace: Sequence[TraceRecord], config: PipelineConfig) -> None:
    """Create the input topics and append the trace keyed by user at its arrival times."""
    for name in (VIEWS_TOPIC, ENGAGEMENTS_TOPIC, SAMPLES_TOPIC):
        store.create_topic(name, config.partitions, config.retention_ms)
    for rec in trace:
        ev = rec.event
        topic = VIEWS_TOPIC if isinstance(ev, ViewEvent) else ENGAGEMENTS_TOPIC
        store.append(topic, ev.user_id.encode("utf-8"), pack_event(ev, config.compress), rec.arrival_time)


def _event_of(rec):
    return unpack_event(rec.value)


def _sample_of(rec):
    # the trainer stand-in never reads view payloads
    return unpack_sample(rec.value, payload=False)


class StreamingPipeline:
    """Builds the two-stage job over a log store that already holds the input topics."""

    def __init__(self, store: LogStore, config: PipelineConfig, start_time: int, checkpoints: CheckpointStore | None = None) -> None:
        config.validate()
        self.store = store
        self.config = config
        self.late_logs: dict[int, list[LateRecord]] = {}
        self.results: dict[int, list[ResultRow]] = {}
        self.updates: dict[int, list[UpdateRecord]] = {}
        self.published: list[LabeledSample] = []  # mirrors the samples topic
        jc = config.join
        ttl = config.effective_dedup_ttl_ms
        start = start_time

        def join_factory(lane: int) -> JoinProcessor:
            return JoinProcessor(jc, self.late_logs.setdefault(lane, []))

        def sink_factory(lane: int) -> SinkProcessor:
            return SinkProcessor(
                f"{SINK_STAGE}-{lane:04d}", config.lr, ttl, self.results.setdefault(lane, []), self.updates.setdefault(lane, [])
            )

        def publish(lane: int, sample: LabeledSample, now: int) -> None:
            self.published.append(sample)
            store.append(SAMPLES_TOPIC, sample.user_id.encode("utf-8"), pack_sample(sample, config.compress), now)

        def event_time(ev) -> int:
            return ev.event_time

        def user(ev) -> str:
            return ev.user_id

        def join_key(ev) -> tuple[str, str]:
            return (ev.user_id, ev.post_id)

        join_stage = StageSpec(
            JOIN_STAGE,
            join_factory,
            [
                SourceSpec(VIEWS_TOPIC, _event_of, event_time, join_key, VIEW_SIDE),
                SourceSpec(ENGAGEMENTS_TOPIC, _event_of, event_time, join_key, ENGAGEMENT_SIDE),
            ],
            parallelism=config.parallelism,
            watermark_delay_ms=jc.watermark_delay_ms,
            queue_capacity=config.queue_capacity,
            rate_per_s=config.join_rate_per_s,
            output=publish,
            output_topic=SAMPLES_TOPIC,
        )
        sink_stage = StageSpec(
            SINK_STAGE,
            sink_factory,
            [SourceSpec(SAMPLES_TOPIC, _sample_of, lambda s: s.emit_time, user)],
            parallelism=config.parallelism,
            watermark_delay_ms=0,
            queue_capacity=config.queue_capacity,
            rate_per_s=config.sink_rate_per_s,
            pauses=[(start + a, start + b) for a, b in config.sink_pauses],
            is_sink=True,
        )
        self.engine = Engine(
            store,
            [join_stage, sink_stage],
            checkpoint_interval_ms=config.checkpoint_interval_ms,
            checkpoints=checkpoints,
            start_time=start,
            closed_topics=(VIEWS_TOPIC, ENGAGEMENTS_TOPIC),
            max_dead_letters=config.max_dead_letters,
            tick_ms=config.tick_ms,
        )

    def run(self, crash_after: int | None = None) -> PipelineResult:
        res = self.engine.run(crash_after=crash_after)
        return PipelineResult(
            samples=list(self.published),
            results=[r for lane in sorted(self.results) for r in self.results[lane]],
            embeddings=self.embeddings(),
            updates=[u for lane in sorted(self.updates) for u in self.updates[lane]],
            late=[r for lane in sorted(self.late_logs) for r in self.late_logs[lane]],
            engine=res,
            join_metrics=res.metrics[JOIN_STAGE],
            sink_metrics=res.metrics[SINK_STAGE],
            conservation=self.engine.conservation(),
        )

    def embeddings(self) -> dict[str, UserEmbedding]:
        out = {}
        for lane in self.engine.stage(SINK_STAGE).lanes:
            backend = lane.backend
            for user, entry in backend.slots[backend.index["embedding"]].items():
                e = entry.value
                out[user] = UserEmbedding(user, e.vector, e.version)
        return out


def run_streaming(
    trace: Sequence[TraceRecord],
    config: PipelineConfig | None = None,
    crash_after: int | None = None,
    store: LogStore | None = None,
    checkpoints: CheckpointStore | None = None,
) -> PipelineResult:
    """Run the streaming pipeline over ``trace`` on a fresh log store (unless one is given)."""
    config = config or PipelineConfig()
    config.validate()
    store = store if store is not None else LogStore()
    load_trace(store, trace, config)
    start = min((r.arrival_time for r in trace), default=0)
    pipe = StreamingPipeline(store, config, start, checkpoints)
    return pipe.run(crash_after)


def run_windows(trace: Sequence[TraceRecord], size_ms: int = 60_000, delay_ms: int = 15_000) -> tuple[list[WindowCount], list[str]]:
    """Count events per tumbling event-time window on one partition.

    Returns the closed windows in firing order and the ids of events that
    arrived after their window had closed.
    """
    store = LogStore()
    store.create_topic("events", 1, 7 * 24 * 3600 * 1000)
    for rec in trace:
        store.append("events", b"", pack_event(rec.event, False), rec.arrival_time)
    missed: list[str] = []
    stage = StageSpec(
        "windows",
        lambda lane: TumblingWindowCounter(size_ms, missed),
        [SourceSpec("events", _event_of, lambda ev: ev.event_time, lambda ev: assign_tumbling_window(ev.event_time, size_ms))],
        watermark_delay_ms=delay_ms,
    )
    start = min((r.arrival_time for r in trace), default=0)
    engine = Engine(store, [stage], checkpoint_interval_ms=None, start_time=start, closed_topics=("events",))
    engine.run()
    return list(engine.outputs["windows"]), missed
