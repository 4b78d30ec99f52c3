"""Deterministic keyed stream runtime driven by a simulated processing-time clock.

A job is a list of stages. Each stage reads partitions of log topics
through bounded channels into a fixed number of lanes (sticky assignment:
partition ``p`` goes to lane ``p % parallelism``). A lane runs one keyed
processor serially, owns its keyed state and timers, and merges the
watermarks of its channels by minimum.

Scheduling is a discrete-event loop. At each instant every channel is
refilled from the log as far as capacity allows, then every lane drains
its channels in ``(append_time, channel)`` order. A lane never takes a head
while another of its channels is empty but could be refilled, so the
processing order is a function of the log contents alone. That is what
makes a restored run retrace the unfailed one. The clock then jumps to the
next instant at which something can happen.

Checkpoints use aligned barriers. The coordinator records every reader
position, then queues a barrier behind the records already in each channel.
A lane that sees the barrier on one channel stops taking from it; once all
its channels have delivered the barrier it snapshots and resumes.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, NamedTuple, Sequence

from streamjoin.codec.schema import decode_binary, encode_binary
from streamjoin.engine.checkpoint import (
    OPERATOR_SCHEMA,
    SINK_SCHEMA,
    Checkpoint,
    CheckpointStore,
    decode_operator,
)
from streamjoin.engine.state import (
    STRING_CODEC,
    Codec,
    KeyedStateBackend,
    MapState,
    StateDescriptor,
    TimerService,
    ValueState,
)
from streamjoin.engine.watermarks import MAX_WATERMARK, NO_WATERMARK, WatermarkGenerator
from streamjoin.errors import InvalidArgument, InvalidConfiguration, RestoreFailed, StreamJoinError
from streamjoin.logstore import LogRecord, LogStore, sticky_assignment

log = logging.getLogger(__name__)

RECORD = 0
WATERMARK = 1
BARRIER = 2


class Item(NamedTuple):
    kind: int
    time: int  # append time of the record, or injection time
    value: Any  # element, or barrier id
    watermark: int  # channel watermark after this item


class DeadLetterOverflow(StreamJoinError):
    pass


class _Crash(Exception):
    pass


class BoundedQueue:
    """FIFO that refuses items beyond its capacity instead of growing or dropping."""

    __slots__ = ("capacity", "_items")

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise InvalidArgument("queue capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    def has_room(self) -> bool:
        return len(self._items) < self.capacity

    def offer(self, item: Any) -> bool:
        if len(self._items) >= self.capacity:
            return False
        self._items.append(item)
        return True

    def peek(self) -> Any:
        return self._items[0]

    def poll(self) -> Any:
        return self._items.popleft()

    def clear(self) -> None:
        self._items.clear()


class KeyedProcessor:
    """Base class for keyed operators.

    ``process_element`` and ``on_timer`` run with ``ctx.key`` set and state
    scoped to that key. Outputs go through ``ctx.emit``.
    """

    state_descriptors: tuple[StateDescriptor, ...] = ()
    key_codec: Codec = STRING_CODEC

    def open(self, ctx: Context) -> None:
        pass

    def process_element(self, side: int, element: Any, ctx: Context) -> None:
        raise NotImplementedError

    def on_timer(self, fire_time: int, ctx: Context) -> None:
        pass

    def snapshot_extra(self) -> bytes:
        return b""

    def restore_extra(self, data: bytes) -> None:
        pass


@dataclass(frozen=True)
class SourceSpec:
    topic: str
    decode: Callable[[LogRecord], Any]
    event_time: Callable[[Any], int]
    key: Callable[[Any], Hashable]
    side: int = 0


@dataclass
class StageSpec:
    name: str
    processor_factory: Callable[[int], KeyedProcessor]
    sources: Sequence[SourceSpec]
    parallelism: int = 1
    watermark_delay_ms: int = 0
    queue_capacity: int = 1024
    rate_per_s: float | None = None
    pauses: Sequence[tuple[int, int]] = ()
    output: Callable[[int, Any, int], None] | None = None
    output_topic: str | None = None
    is_sink: bool = False

    def validate(self) -> None:
        if self.parallelism < 1:
            raise InvalidConfiguration(f"stage {self.name}: parallelism must be >= 1")
        if not self.sources:
            raise InvalidConfiguration(f"stage {self.name}: needs at least one source")
        if self.watermark_delay_ms < 0:
            raise InvalidConfiguration(f"stage {self.name}: watermark delay must be >= 0")
        if self.queue_capacity < 1:
            raise InvalidConfiguration(f"stage {self.name}: queue capacity must be >= 1")
        if self.rate_per_s is not None and self.rate_per_s <= 0:
            raise InvalidConfiguration(f"stage {self.name}: rate must be positive")
        for s, e in self.pauses:
            if e < s:
                raise InvalidConfiguration(f"stage {self.name}: pause ends before it starts")


@dataclass
class DeadLetter:
    stage: str
    lane: int
    what: str
    error: str


class Channel:
    """Reader of one topic partition feeding one lane through a bounded queue."""

    def __init__(self, engine: Engine, stage: StageSpec, source: SourceSpec, partition: int, index: int) -> None:
        self.engine = engine
        self.source = source
        self.topic = source.topic
        self.partition = partition
        self.index = index
        self.queue = BoundedQueue(stage.queue_capacity)
        self.wmgen = WatermarkGenerator(stage.watermark_delay_ms)
        self.pending: deque[Item] = deque()
        self.pos = 0
        self.eos_sent = False
        self._buf: list[LogRecord] = []
        self._bi = 0
        self.enqueued = 0

    def seek(self, offset: int, watermark: int) -> None:
        self.pos = offset
        self._buf, self._bi = [], 0
        self.queue.clear()
        self.pending.clear()
        self.eos_sent = watermark == MAX_WATERMARK
        gen = self.wmgen
        gen.current = watermark if watermark != MAX_WATERMARK else NO_WATERMARK
        gen.max_seen = gen.current + gen.delay_ms if gen.current >= 0 else NO_WATERMARK

    def _peek(self) -> LogRecord | None:
        if self._bi >= len(self._buf):
            self._buf = self.engine.log.read(self.topic, self.partition, self.pos, 512)
            self._bi = 0
            if not self._buf:
                return None
        return self._buf[self._bi]

    def ready(self, now: int) -> bool:
        """Whether a refill at ``now`` would enqueue something."""
        if not self.queue.has_room():
            return False
        if self.pending:
            return True
        rec = self._peek()
        if rec is not None:
            return rec.append_time <= now
        return not self.eos_sent and self.topic in self.engine.closed_topics

    def next_time(self) -> int | None:
        if not self.queue.has_room() or self.pending:
            return None
        rec = self._peek()
        return rec.append_time if rec is not None else None

    def fill(self, now: int) -> bool:
        q = self.queue
        moved = False
        while self.pending and q.has_room():
            q.offer(self.pending.popleft())
            moved = True
        if self.pending:
            return moved
        src = self.source
        gen = self.wmgen
        while q.has_room():
            rec = self._peek()
            if rec is None:
                if not self.eos_sent and self.topic in self.engine.closed_topics:
                    self.eos_sent = True
                    q.offer(Item(WATERMARK, now, None, MAX_WATERMARK))
                    moved = True
                break
            if rec.append_time > now:
                break
            self._bi += 1
            self.pos += 1
            element = src.decode(rec)
            wm = gen.observe(src.event_time(element))
            q.offer(Item(RECORD, rec.append_time, element, wm))
            self.enqueued += 1
            moved = True
        return moved

    def inject(self, item: Item) -> None:
        if not self.pending and self.queue.offer(item):
            return
        self.pending.append(item)


class Context:
    """What a processor callback sees: current key, time, state, timers and output."""

    __slots__ = ("_lane", "key", "late", "_handles")

    def __init__(self, lane: Lane) -> None:
        self._lane = lane
        self.key: Hashable | None = None
        self.late = False
        self._handles: dict[str, Any] = {}

    @property
    def watermark(self) -> int:
        return self._lane.watermark

    @property
    def now(self) -> int:
        return self._lane.engine.now

    @property
    def lane(self) -> int:
        return self._lane.index

    @property
    def metrics(self) -> dict[str, int]:
        return self._lane.metrics

    def count(self, name: str, n: int = 1) -> None:
        m = self._lane.metrics
        m[name] = m.get(name, 0) + n

    def emit(self, out: Any) -> None:
        self._lane.emit(out)

    def register_timer(self, fire_time: int) -> None:
        if self.key is None:
            raise InvalidArgument("timers can only be registered inside a keyed callback")
        self._lane.timers.register(self.key, fire_time)

    def value_state(self, name: str) -> ValueState:
        h = self._handles.get(name)
        if h is None:
            h = self._handles[name] = self._lane.backend.value(name)
        return h

    def map_state(self, name: str) -> MapState:
        h = self._handles.get(name)
        if h is None:
            h = self._handles[name] = self._lane.backend.map(name)
        return h


class Lane:
    def __init__(self, engine: Engine, stage: StageRuntime, index: int, channels: list[Channel]) -> None:
        self.engine = engine
        self.stage = stage
        self.spec = stage.spec
        self.index = index
        self.channels = channels
        self.processor = self.spec.processor_factory(index)
        self.backend = KeyedStateBackend(self.processor.state_descriptors, self.processor.key_codec)
        self.timers = TimerService(self.backend.key_codec.encode)
        self.channel_wms = [NO_WATERMARK] * len(channels)
        self.watermark = NO_WATERMARK if channels else MAX_WATERMARK
        self.metrics: dict[str, int] = {}
        self.blocked: set[int] = set()
        self.busy_until = 0.0
        self.cost = 1000.0 / self.spec.rate_per_s if self.spec.rate_per_s else 0.0
        self.ctx = Context(self)
        self.processed = 0
        self.in_callback: Hashable | None = None
        self.processor.open(self.ctx)

    @property
    def dead_letters(self) -> list[DeadLetter]:
        return self.engine.dead_letters.setdefault((self.spec.name, self.index), [])

    @property
    def finished(self) -> bool:
        return self.watermark == MAX_WATERMARK and not any(ch.queue or ch.pending for ch in self.channels)

    def paused_until(self, now: int) -> int | None:
        for s, e in self.spec.pauses:
            if s <= now < e:
                return e
        return None

    def emit(self, out: Any) -> None:
        self.metrics["emitted"] = self.metrics.get("emitted", 0) + 1
        self.stage.emit(self.index, out)

    def _dead_letter(self, what: str, exc: Exception) -> None:
        letters = self.dead_letters
        letters.append(DeadLetter(self.spec.name, self.index, what, f"{type(exc).__name__}: {exc}"))
        self.metrics["dead_lettered"] = self.metrics.get("dead_lettered", 0) + 1
        log.warning("dead letter in %s[%d]: %s (%s)", self.spec.name, self.index, what, exc)
        if len(letters) > self.engine.max_dead_letters:
            raise DeadLetterOverflow(f"{self.spec.name}[{self.index}] exceeded {self.engine.max_dead_letters} dead letters")

    def step(self, now: int) -> bool:
        """Drain channels at ``now`` as far as order, rate and barriers allow."""
        if self.paused_until(now) is not None:
            return False
        progressed = False
        channels = self.channels
        blocked = self.blocked
        cost = self.cost
        idle: set[int] = set()  # empty channels known not to be refillable now
        while True:
            if cost and self.busy_until >= now + 1:
                break
            best = -1
            best_time = 0
            control = False
            for i, ch in enumerate(channels):
                if i in blocked:
                    continue
                q = ch.queue
                if not q:
                    if i in idle:
                        continue
                    if ch.ready(now):
                        return True  # refill first to keep arrival order
                    idle.add(i)
                    continue
                head = q.peek()
                if head.kind != RECORD:
                    best, control = i, True
                    break
                if best < 0 or head.time < best_time:
                    best, best_time = i, head.time
            if best < 0:
                break
            item = channels[best].queue.poll()
            progressed = True
            if control:
                if item.kind == BARRIER:
                    self._on_barrier(best, item.value)
                else:
                    self._set_channel_wm(best, item.watermark)
                continue
            if cost:
                self.busy_until = max(self.busy_until, float(now)) + cost
            self._on_record(channels[best], best, item)
        return progressed

    def next_time(self, now: int) -> int | None:
        if not any(ch.queue for i, ch in enumerate(self.channels) if i not in self.blocked):
            return None
        resume = self.paused_until(now)
        if resume is not None:
            return resume
        if self.cost and self.busy_until >= now + 1:
            return int(math.ceil(self.busy_until))
        return None

    def _on_record(self, ch: Channel, idx: int, item: Item) -> None:
        element = item.value
        src = ch.source
        ctx = self.ctx
        key = src.key(element)
        ctx.key = key
        self.backend.current_key = key
        ctx.late = src.event_time(element) < self.watermark
        self.processed += 1
        self.metrics["records_in"] = self.metrics.get("records_in", 0) + 1
        if ctx.late:
            self.metrics["late_records"] = self.metrics.get("late_records", 0) + 1
        self.in_callback = key
        try:
            self.processor.process_element(src.side, element, ctx)
        except DeadLetterOverflow:
            raise
        except Exception as exc:  # noqa: BLE001 - poisoned records must not stop the lane
            self._dead_letter(f"element {element!r:.200}", exc)
        finally:
            self.in_callback = None
            ctx.late = False
        self.engine._after_record(self)
        if item.watermark != self.channel_wms[idx]:
            self._set_channel_wm(idx, item.watermark)

    def _set_channel_wm(self, idx: int, wm: int) -> None:
        if wm <= self.channel_wms[idx]:
            return
        self.channel_wms[idx] = wm
        merged = min(self.channel_wms)
        if merged > self.watermark:
            self._advance(merged)

    def _advance(self, wm: int) -> None:
        self.watermark = wm
        self.backend.watermark = wm
        ctx = self.ctx
        while True:
            entry = self.timers.pop_before(wm)
            if entry is None:
                break
            fire_time, key = entry
            ctx.key = key
            self.backend.current_key = key
            self.in_callback = key
            try:
                self.processor.on_timer(fire_time, ctx)
            except DeadLetterOverflow:
                raise
            except Exception as exc:  # noqa: BLE001
                self._dead_letter(f"timer {fire_time} key {key!r}", exc)
            finally:
                self.in_callback = None
        ctx.key = None
        self.backend.current_key = None

    def _on_barrier(self, idx: int, barrier_id: int) -> None:
        self.blocked.add(idx)
        if len(self.blocked) == len(self.channels):
            self.blocked.clear()
            self.engine._ack(self, barrier_id, self.snapshot())

    def snapshot(self) -> bytes:
        timer_count, timers = self.timers.encoded()
        entry_count, entries = self.backend.snapshot_chunk()
        names = sorted(self.metrics)
        return encode_binary(
            {
                "operator": self.spec.name,
                "lane": self.index,
                "watermark": self.watermark,
                "channel_watermarks": list(self.channel_wms),
                "timer_count": timer_count,
                "timers": timers,
                "entry_count": entry_count,
                "entries": entries,
                "metric_names": names,
                "metric_values": [self.metrics[n] for n in names],
                "dead_letters": len(self.dead_letters),
                "extra": self.processor.snapshot_extra(),
            },
            OPERATOR_SCHEMA,
        )

    def restore(self, state: dict) -> None:
        if len(state["channel_watermarks"]) != len(self.channels):
            raise RestoreFailed(f"{self.spec.name}[{self.index}]: channel count changed since the checkpoint")
        self.watermark = state["watermark"]
        self.channel_wms = list(state["channel_watermarks"])
        kc = self.backend.key_codec
        self.timers.restore([(t, kc.decode(k)) for t, k in zip(state["timer_times"], state["timer_keys"])])
        self.backend.restore(state["entries"], self.watermark)
        self.metrics = dict(zip(state["metric_names"], state["metric_values"]))
        del self.dead_letters[state["dead_letters"] :]
        self.processor.restore_extra(state["extra"])


class StageRuntime:
    def __init__(self, engine: Engine, spec: StageSpec) -> None:
        self.engine = engine
        self.spec = spec
        self.outputs = engine.outputs.setdefault(spec.name, [])  # survives restores
        lanes_channels: list[list[Channel]] = [[] for _ in range(spec.parallelism)]
        lane_ids = [f"{spec.name}-{i:04d}" for i in range(spec.parallelism)]
        lane_of = {lid: i for i, lid in enumerate(lane_ids)}
        self.channels: list[Channel] = []
        for src in spec.sources:
            topic = engine.log.topic(src.topic)
            assignment = engine.log.assign_partitions(spec.name, src.topic, lane_ids)
            for p in range(topic.partition_count):
                lane_idx = lane_of[assignment[p]]
                ch = Channel(engine, spec, src, p, len(lanes_channels[lane_idx]))
                lanes_channels[lane_idx].append(ch)
                self.channels.append(ch)
        self.lanes = [Lane(engine, self, i, chs) for i, chs in enumerate(lanes_channels)]

    def emit(self, lane: int, out: Any) -> None:
        if self.spec.output is not None:
            self.spec.output(lane, out, self.engine.now)
        else:
            self.outputs.append(out)

    @property
    def finished(self) -> bool:
        return all(lane.finished for lane in self.lanes)

    def metrics(self) -> dict[str, int]:
        total: dict[str, int] = {}
        for lane in self.lanes:
            for k, v in lane.metrics.items():
                total[k] = total.get(k, 0) + v
        return total


@dataclass
class EngineResult:
    end_time: int
    checkpoints: list[int]
    crashed_at: int | None
    restored_from: int | None
    redelivered: int
    redelivered_by_source: dict[tuple[str, int], tuple[int, int]]
    max_buffered: int
    buffer_capacity: int
    metrics: dict[str, dict[str, int]]
    dead_letters: list[DeadLetter] = field(default_factory=list)


class Engine:
    def __init__(
        self,
        log_store: LogStore,
        stages: Sequence[StageSpec],
        checkpoint_interval_ms: int | None = 10_000,
        checkpoints: CheckpointStore | None = None,
        start_time: int = 0,
        closed_topics: Sequence[str] = (),
        max_dead_letters: int = 1000,
        tick_ms: int = 1,
    ) -> None:
        if checkpoint_interval_ms is not None and checkpoint_interval_ms < 1:
            raise InvalidConfiguration("checkpoint interval must be >= 1 ms")
        names = [s.name for s in stages]
        if len(set(names)) != len(names):
            raise InvalidConfiguration("stage names must be unique")
        for s in stages:
            s.validate()
        self.log = log_store
        self.specs = list(stages)
        self.interval = checkpoint_interval_ms
        self.store = checkpoints if checkpoints is not None else CheckpointStore()
        self.now = start_time
        self.closed_topics: set[str] = set(closed_topics)
        self.max_dead_letters = max_dead_letters
        if tick_ms < 1:
            raise InvalidConfiguration("tick_ms must be >= 1")
        self.tick = tick_ms
        self.dead_letters: dict[tuple[str, int], list[DeadLetter]] = {}
        self.outputs: dict[str, list[Any]] = {}
        self.next_checkpoint_id = 1
        self._build()
        self.next_checkpoint = start_time + self.interval if self.interval else None
        self.max_buffered = 0
        self.crash_after: int | None = None
        self.crashed_at: int | None = None
        self.restored_from: int | None = None
        self.redelivered = 0
        self.redelivered_by_source: dict[tuple[str, int], tuple[int, int]] = {}
        self.on_checkpoint: Callable[[Checkpoint], None] | None = None

    def _build(self, checkpoint: Checkpoint | None = None) -> None:
        self.stages = [StageRuntime(self, spec) for spec in self.specs]
        self.channels = [ch for st in self.stages for ch in st.channels]
        self.lanes = [lane for st in self.stages for lane in st.lanes]
        self.capacity = sum(ch.queue.capacity for ch in self.channels)
        self.inflight: tuple[int, list[tuple[str, int, int]], dict[tuple[str, int], bytes]] | None = None
        self.first_stage_processed = 0
        for st in self.stages:
            # a restored stage produces into its output topic again
            if st.spec.output_topic is not None:
                self.closed_topics.discard(st.spec.output_topic)
        offsets = checkpoint.offsets() if checkpoint is not None else {}
        states: dict[tuple[str, int], dict] = {}
        if checkpoint is not None:
            blobs = list(checkpoint.operator_blobs)
            if checkpoint.sink_blob:
                blobs += decode_binary(checkpoint.sink_blob, SINK_SCHEMA)["lanes"]
            for blob in blobs:
                st = decode_operator(blob)
                states[(st["operator"], st["lane"])] = st
            expected = {(lane.spec.name, lane.index) for lane in self.lanes}
            if set(states) != expected:
                raise RestoreFailed(f"checkpoint operators {sorted(states)} do not match the job {sorted(expected)}")
        for st in self.stages:
            for lane in st.lanes:
                state = states.get((st.spec.name, lane.index))
                if state is not None:
                    lane.restore(state)
                for i, ch in enumerate(lane.channels):
                    key = (ch.topic, ch.partition)
                    if checkpoint is not None:
                        if key not in offsets:
                            raise RestoreFailed(f"checkpoint has no offset for {ch.topic}/{ch.partition}")
                        ch.seek(offsets[key], lane.channel_wms[i])
                    else:
                        ch.seek(self.log.fetch_committed(st.spec.name, ch.topic, ch.partition), NO_WATERMARK)

    # -- checkpoints -------------------------------------------------------------

    def trigger_checkpoint(self) -> int:
        cid = self.next_checkpoint_id
        self.next_checkpoint_id += 1
        offsets = [(ch.topic, ch.partition, ch.pos) for ch in self.channels]
        self.inflight = (cid, offsets, {})
        for ch in self.channels:
            ch.inject(Item(BARRIER, self.now, cid, 0))
        for lane in self.lanes:
            if not lane.channels:
                self._ack(lane, cid, lane.snapshot())
        return cid

    def _ack(self, lane: Lane, cid: int, blob: bytes) -> None:
        if self.inflight is None or self.inflight[0] != cid:
            return
        acks = self.inflight[2]
        acks[(lane.spec.name, lane.index)] = blob
        if len(acks) < len(self.lanes):
            return
        _, offsets, _ = self.inflight
        self.inflight = None
        op_blobs, sink_blobs = [], []
        for lane_ in self.lanes:
            b = acks[(lane_.spec.name, lane_.index)]
            (sink_blobs if lane_.spec.is_sink else op_blobs).append(b)
        sink_blob = encode_binary({"lanes": sink_blobs}, SINK_SCHEMA) if sink_blobs else b""
        ckpt = Checkpoint(cid, offsets, op_blobs, sink_blob)
        try:
            self.store.save(ckpt)
        except OSError as exc:
            log.error("checkpoint %d aborted: %s", cid, exc)
            return
        ck_offsets = ckpt.offsets()
        for st in self.stages:
            for ch in st.channels:
                self.log.commit_offset(st.spec.name, ch.topic, ch.partition, ck_offsets[(ch.topic, ch.partition)])
        log.debug("checkpoint %d complete at t=%d", cid, self.now)
        if self.on_checkpoint is not None:
            self.on_checkpoint(ckpt)

    def restore(self, checkpoint: Checkpoint | None) -> None:
        """Rebuild every lane and reader from ``checkpoint`` (or from committed offsets)."""
        self._build(checkpoint)
        if checkpoint is not None:
            self.next_checkpoint_id = max(self.next_checkpoint_id, checkpoint.checkpoint_id + 1)

    # -- main loop ------------------------------------------------------------------

    def _after_record(self, lane: Lane) -> None:
        if lane.stage is self.stages[0]:
            self.first_stage_processed += 1
            if self.crash_after is not None and self.first_stage_processed >= self.crash_after:
                self.crash_after = None
                raise _Crash()

    @property
    def finished(self) -> bool:
        return all(st.finished for st in self.stages) and self.inflight is None

    def _buffered(self) -> int:
        return sum(len(ch.queue) for ch in self.channels)

    def _quiesce(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for st in self.stages:
                for ch in st.channels:
                    if ch.fill(self.now):
                        progressed = True
                b = self._buffered()
                if b > self.max_buffered:
                    self.max_buffered = b
                for lane in st.lanes:
                    if lane.step(self.now):
                        progressed = True
                if st.spec.output_topic is not None and st.spec.output_topic not in self.closed_topics and st.finished:
                    self.closed_topics.add(st.spec.output_topic)
                    progressed = True

    def _next_time(self) -> int | None:
        times = []
        for ch in self.channels:
            t = ch.next_time()
            if t is not None:
                times.append(max(t, self.now + 1))
        for lane in self.lanes:
            t = lane.next_time(self.now)
            if t is not None:
                times.append(max(t, self.now + 1))
        if self.next_checkpoint is not None and self.inflight is None and times:
            times.append(max(self.next_checkpoint, self.now + 1))
        return min(times) if times else None

    def run(self, crash_after: int | None = None, until: int | None = None) -> EngineResult:
        """Run to completion. With ``crash_after``, crash once after that many
        first-stage records, restore from the latest checkpoint and carry on."""
        self.crash_after = crash_after
        while True:
            try:
                self._run_until_done(until)
                break
            except _Crash:
                self._recover()
        return self.result()

    def _run_until_done(self, until: int | None) -> None:
        while True:
            if self.next_checkpoint is not None and self.now >= self.next_checkpoint:
                if self.inflight is None and not self.finished:
                    self.trigger_checkpoint()
                while self.next_checkpoint <= self.now:
                    self.next_checkpoint += self.interval
            self._quiesce()
            if self.finished:
                return
            nxt = self._next_time()
            if nxt is None:
                if self.inflight is not None and not any(ch.queue or ch.pending for ch in self.channels):
                    raise RuntimeError("checkpoint barrier lost")  # pragma: no cover
                stuck = [f"{ch.topic}/{ch.partition}" for ch in self.channels if not ch.eos_sent]
                raise RuntimeError(f"pipeline stalled at t={self.now}; open inputs: {stuck[:8]}")
            nxt = max(nxt, self.now + self.tick)
            if until is not None and nxt > until:
                self.now = until
                return
            self.now = nxt

    def _recover(self) -> None:
        crash_pos = {(ch.topic, ch.partition): ch.pos for ch in self.channels}
        self.crashed_at = self.now
        ckpt = self.store.load_latest()
        self.restored_from = ckpt.checkpoint_id if ckpt is not None else None
        log.info("crash at t=%d; restoring from checkpoint %s", self.now, self.restored_from)
        self.restore(ckpt)
        redelivered = 0
        for ch in self.channels:
            key = (ch.topic, ch.partition)
            span = (ch.pos, crash_pos[key])
            self.redelivered_by_source[key] = span
            redelivered += max(0, span[1] - span[0])
        self.redelivered += redelivered

    def result(self) -> EngineResult:
        return EngineResult(
            end_time=self.now,
            checkpoints=list(self.store.completed),
            crashed_at=self.crashed_at,
            restored_from=self.restored_from,
            redelivered=self.redelivered,
            redelivered_by_source=dict(self.redelivered_by_source),
            max_buffered=self.max_buffered,
            buffer_capacity=self.capacity,
            metrics={st.spec.name: st.metrics() for st in self.stages},
            dead_letters=[d for letters in self.dead_letters.values() for d in letters],
        )

    def stage(self, name: str) -> StageRuntime:
        for st in self.stages:
            if st.spec.name == name:
                return st
        raise KeyError(name)

    def conservation(self) -> dict[str, dict[str, int]]:
        """Per stage: every record in the log is processed, queued or still unread."""
        out = {}
        for st in self.stages:
            total = sum(self.log.end_offset(ch.topic, ch.partition) - self.log.start_offset(ch.topic, ch.partition) for ch in st.channels)
            unread = sum(self.log.end_offset(ch.topic, ch.partition) - ch.pos for ch in st.channels)
            queued = sum(1 for ch in st.channels for it in ch.queue._items if it.kind == RECORD)
            processed = sum(lane.metrics.get("records_in", 0) for lane in st.lanes)
            out[st.spec.name] = {"total": total, "unread": unread, "queued": queued, "processed": processed}
        return out
