from __future__ import annotations

import random
from collections import Counter

import pytest

from streamjoin.engine.checkpoint import (
    Checkpoint,
    CheckpointStore,
    decode_checkpoint,
    encode_checkpoint,
    operator_states,
    read_checkpoint_file,
)
from streamjoin.engine.runtime import DeadLetterOverflow, Engine, KeyedProcessor, SourceSpec, StageSpec
from streamjoin.engine.state import INT_CODEC, StateDescriptor
from streamjoin.errors import InvalidConfiguration, RestoreFailed
from streamjoin.logstore import LogStore, partition_for


def _decode(rec):
    key, t, seq = rec.value.decode().split("|")
    return key, int(t), int(seq), rec.offset


def _load(store, events, partitions=4, topic="in"):
    store.create_topic(topic, partitions, 10**12)
    for key, t, seq, arrival in events:
        store.append(topic, key.encode(), f"{key}|{t}|{seq}".encode(), arrival)


def _engine(store, factory, parallelism=2, delay=0, capacity=16, interval=None, checkpoints=None, **kw):
    stage = StageSpec(
        "op",
        factory,
        [SourceSpec("in", _decode, lambda e: e[1], lambda e: e[0])],
        parallelism=parallelism,
        watermark_delay_ms=delay,
        queue_capacity=capacity,
        **kw,
    )
    return Engine(store, [stage], checkpoint_interval_ms=interval, checkpoints=checkpoints, closed_topics=("in",))


def _events(n=400, keys=12, seed=0):
    rng = random.Random(seed)
    return [(f"k{rng.randrange(keys)}", i * 10, i, i * 10) for i in range(n)]


class Identity(KeyedProcessor):
    def process_element(self, side, element, ctx):
        ctx.emit(element)


class Counter_(KeyedProcessor):
    state_descriptors = (StateDescriptor("n", "value", None, INT_CODEC),)

    def process_element(self, side, element, ctx):
        s = ctx.value_state("n")
        s.set(s.get(0) + 1)


def test_identity_preserves_per_key_order():
    store = LogStore()
    events = _events()
    _load(store, events)
    eng = _engine(store, lambda i: Identity())
    eng.run()
    out = eng.outputs["op"]
    assert sorted(e[2] for e in out) == list(range(len(events)))
    for key in {e[0] for e in events}:
        assert [e[2] for e in out if e[0] == key] == [seq for k, _, seq, _ in events if k == key]


def test_counter_per_key():
    store = LogStore()
    events = [(f"k{k}", i, i, i) for i in range(50) for k in range(5)]
    events.sort(key=lambda e: e[3])
    _load(store, events)
    eng = _engine(store, lambda i: Counter_())
    eng.run()
    counts = {}
    for lane in eng.stage("op").lanes:
        for key, entry in lane.backend.slots[0].items():
            counts[key] = entry.value
    assert counts == {f"k{k}": 50 for k in range(5)}


class Reentrancy(KeyedProcessor):
    def __init__(self):
        self.active = None
        self.overlaps = 0

    def process_element(self, side, element, ctx):
        if self.active is not None:
            self.overlaps += 1
        self.active = ctx.key
        ctx.register_timer(element[1] + 5)
        self.active = None

    def on_timer(self, fire_time, ctx):
        if self.active is not None:
            self.overlaps += 1


def test_callbacks_never_overlap():
    store = LogStore()
    _load(store, _events(300))
    procs = []
    eng = _engine(store, lambda i: procs.append(Reentrancy()) or procs[-1])
    eng.run()
    assert procs and all(p.overlaps == 0 for p in procs)


class TimerLog(KeyedProcessor):
    def __init__(self, fired):
        self.fired = fired

    def process_element(self, side, element, ctx):
        ctx.register_timer(element[1] + 100)
        ctx.register_timer(element[1] + 100)

    def on_timer(self, fire_time, ctx):
        self.fired.append((fire_time, ctx.key, ctx.watermark))


def test_timers_fire_once_in_order_per_lane():
    store = LogStore()
    events = _events(200, keys=5)
    _load(store, events, partitions=1)
    fired = []
    eng = _engine(store, lambda i: TimerLog(fired), parallelism=1)
    eng.run()
    assert len(fired) == len({(t + 100, k) for k, t, _, _ in events})
    assert [(t, k) for t, k, _ in fired] == sorted((t, k) for t, k, _ in fired)
    assert all(wm > t for t, _, wm in fired)


class Poison(KeyedProcessor):
    def process_element(self, side, element, ctx):
        if element[2] % 10 == 0:
            raise ValueError("poisoned")
        ctx.emit(element)


def test_failing_callbacks_go_to_dead_letters():
    store = LogStore()
    _load(store, _events(100))
    eng = _engine(store, lambda i: Poison())
    res = eng.run()
    assert len(res.dead_letters) == 10
    assert "poisoned" in res.dead_letters[0].error
    assert len(eng.outputs["op"]) == 90


def test_dead_letter_overflow():
    store = LogStore()
    _load(store, _events(100))
    stage = StageSpec("op", lambda i: Poison(), [SourceSpec("in", _decode, lambda e: e[1], lambda e: e[0])])
    eng = Engine(store, [stage], checkpoint_interval_ms=None, closed_topics=("in",), max_dead_letters=3)
    with pytest.raises(DeadLetterOverflow):
        eng.run()


def test_late_flag_seen_by_processor():
    store = LogStore()
    flags = []

    class Late(KeyedProcessor):
        def process_element(self, side, element, ctx):
            flags.append((element[1], ctx.late))

    # t=100 arrives after t=5000 with zero delay: behind the watermark
    _load(store, [("k", 5000, 0, 0), ("k", 100, 1, 1)], partitions=1)
    _engine(store, lambda i: Late(), parallelism=1).run()
    assert flags == [(5000, False), (100, True)]


def test_stage_validation():
    with pytest.raises(InvalidConfiguration):
        StageSpec("x", lambda i: Identity(), []).validate()
    with pytest.raises(InvalidConfiguration):
        StageSpec("x", lambda i: Identity(), [SourceSpec("in", _decode, len, len)], parallelism=0).validate()


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_file_round_trip_and_truncation(tmp_path):
    store = LogStore()
    _load(store, _events(500))
    ckpts = CheckpointStore(tmp_path)
    eng = _engine(store, lambda i: Counter_(), interval=1000, checkpoints=ckpts)
    eng.run()
    assert ckpts.completed
    data = ckpts.latest
    ck = decode_checkpoint(data)
    assert encode_checkpoint(ck) == data
    path = tmp_path / f"chk-{ck.checkpoint_id:06d}.bin"
    assert read_checkpoint_file(path).checkpoint_id == ck.checkpoint_id
    manifest = (tmp_path / "MANIFEST").read_text().splitlines()
    assert len(manifest) == len(ckpts.completed)
    assert manifest[-1].startswith(f"checkpoint_id={ck.checkpoint_id} path={path.name}")
    for cut in (1, 5, len(data) // 2, len(data) - 1):
        with pytest.raises(RestoreFailed):
            decode_checkpoint(data[:cut])
    with pytest.raises(RestoreFailed):
        decode_checkpoint(b"")
    with pytest.raises(RestoreFailed):
        read_checkpoint_file(tmp_path / "missing.bin")


def test_idle_checkpoint_has_committed_offsets():
    store = LogStore()
    _load(store, [])
    eng = _engine(store, lambda i: Counter_())
    cid = eng.trigger_checkpoint()
    eng.run()
    ck = eng.store.load_latest()
    assert ck.checkpoint_id == cid
    assert all(o == 0 for _, _, o in ck.source_offsets)
    assert all(st["entries"] == [] and st["timer_times"] == [] for st in operator_states(ck))


def test_restore_gives_byte_identical_snapshots():
    store = LogStore()
    _load(store, _events(600))
    eng = _engine(store, lambda i: Counter_(), interval=1500)
    seen: list[Checkpoint] = []
    eng.on_checkpoint = seen.append
    eng.run(until=3000)
    assert seen
    ck = seen[-1]
    other = _engine(store, lambda i: Counter_(), interval=1500)
    other.restore(ck)
    again = [lane.snapshot() for lane in other.lanes]
    assert again == ck.operator_blobs


def test_restore_rejects_mismatched_job():
    store = LogStore()
    _load(store, _events(50))
    eng = _engine(store, lambda i: Counter_(), parallelism=2)
    eng.trigger_checkpoint()
    eng.run()
    ck = eng.store.load_latest()
    with pytest.raises(RestoreFailed):
        _engine(store, lambda i: Counter_(), parallelism=3).restore(ck)


def test_redelivered_records_are_exactly_the_replayed_offsets():
    store = LogStore()
    events = _events(3000, keys=40, seed=4)
    _load(store, events)
    processed = []

    class Log(KeyedProcessor):
        def process_element(self, side, element, ctx):
            processed.append((partition_for(element[0].encode(), 4), element[3]))

    eng = _engine(store, lambda i: Log(), interval=2000)
    res = eng.run(crash_after=1700)
    assert res.crashed_at is not None and res.restored_from is not None
    counts = Counter(processed)
    twice = {k for k, c in counts.items() if c == 2}
    expected = {(p, off) for (t, p), (a, b) in res.redelivered_by_source.items() for off in range(a, b)}
    assert twice == expected
    assert res.redelivered == len(expected) > 0
    assert max(counts.values()) == 2
    assert len(counts) == len(events)


def test_crash_restore_matches_unfailed_run():
    def final(crash):
        store = LogStore()
        _load(store, _events(2000, keys=30, seed=9))
        eng = _engine(store, lambda i: Counter_(), interval=1000)
        eng.run(crash_after=crash)
        return sorted((k, e.value) for lane in eng.stage("op").lanes for k, e in lane.backend.slots[0].items())

    assert final(1234) == final(None)


def test_backpressure_bounds_buffers_and_loses_nothing():
    store = LogStore()
    events = [(f"k{i % 7}", i, i, 0) for i in range(2000)]  # all arrive at once
    _load(store, events)
    eng = _engine(store, lambda i: Identity(), capacity=8, rate_per_s=2000.0)
    res = eng.run()
    assert res.max_buffered <= res.buffer_capacity == 8 * 4
    assert len(eng.outputs["op"]) == 2000
    cons = eng.conservation()["op"]
    assert cons["processed"] == cons["total"] == 2000 and cons["queued"] == cons["unread"] == 0


def test_pause_blocks_without_loss():
    store = LogStore()
    events = [(f"k{i % 5}", i * 10, i, i * 10) for i in range(500)]
    _load(store, events)
    eng = _engine(store, lambda i: Identity(), capacity=4, pauses=[(100, 3000)])
    mid = eng.run(until=2000)
    assert mid.max_buffered <= mid.buffer_capacity
    res = eng.run()
    assert len(eng.outputs["op"]) == 500
    assert res.max_buffered <= res.buffer_capacity
