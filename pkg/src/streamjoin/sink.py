"""Idempotent training sink: sample dedup, per-user embedding updates, contention checks.

The sink stands in for the online trainer. Each user owns a 32-dimensional
embedding updated by an exponential moving average towards a hashed post
direction, signed by whether the sample has any positive label. The update
is order-sensitive on purpose, so lost or interleaved updates show up.
"""

from __future__ import annotations

import random
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from streamjoin.codec.schema import INT64, array_of, decode_value, encode_value
from streamjoin.engine.runtime import Context, KeyedProcessor
from streamjoin.engine.state import INT_CODEC, STRING_CODEC, Codec, StateDescriptor
from streamjoin.errors import InvalidArgument, InvalidState
from streamjoin.logstore import partition_for, sticky_assignment
from streamjoin.model import LabeledSample, fnv1a64

DIM = 32
RESULTS_HEADER = "#sample_id:string,user_id:string,version:int64,labels:bits"


@lru_cache(maxsize=65536)
def _direction(post_id: str) -> bytes:
    rng = np.random.default_rng(fnv1a64(post_id.encode("utf-8")))
    v = rng.standard_normal(DIM)
    return (v / np.linalg.norm(v)).tobytes()


def post_direction(post_id: str) -> np.ndarray:
    """Deterministic unit vector for a post, seeded by its FNV-1a hash."""
    return np.frombuffer(_direction(post_id), dtype=np.float64)


@dataclass(frozen=True)
class UserEmbedding:
    user_id: str
    vector: np.ndarray = field(default_factory=lambda: np.zeros(DIM))
    version: int = 0

    def to_bytes(self) -> bytes:
        return struct.pack(">q", self.version) + np.asarray(self.vector, dtype=np.float64).tobytes()

    @classmethod
    def from_bytes(cls, user_id: str, data: bytes) -> UserEmbedding:
        (version,) = struct.unpack_from(">q", data)
        return cls(user_id, np.frombuffer(data[8:], dtype=np.float64).copy(), version)


def apply_update(emb: UserEmbedding, sample: LabeledSample, lr: float) -> UserEmbedding:
    """``v' = (1 - lr) v + lr y h(post)`` with ``y = +1`` for any positive label, else -1."""
    if not 0.0 < lr < 1.0:
        raise InvalidArgument(f"learning rate must be in (0, 1), got {lr}")
    v = np.asarray(emb.vector, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidState(f"embedding of {emb.user_id} is not finite")
    y = 1.0 if sample.labels.any() else -1.0
    return UserEmbedding(emb.user_id, (1.0 - lr) * v + (lr * y) * post_direction(sample.view.post_id), emb.version + 1)


class UpdateRecord(NamedTuple):
    consumer: str
    user_id: str
    version_read: int
    version_written: int


def contention_detector(updates: Iterable[UpdateRecord]) -> int:
    """Number of users whose updates, in write order, do not read 0,1,2,... and write 1,2,3,..."""
    expected: dict[str, int] = defaultdict(int)
    bad: set[str] = set()
    for u in updates:
        n = expected[u.user_id]
        if u.version_read != n or u.version_written != n + 1:
            bad.add(u.user_id)
        expected[u.user_id] = n + 1
    return len(bad)


class ResultRow(NamedTuple):
    sample_id: str
    user_id: str
    version: int
    labels: str

    def line(self) -> str:
        return f"{self.sample_id},{self.user_id},{self.version},{self.labels}"


class DedupState:
    """Offline dedup by sample id with a TTL on the first-seen time."""

    def __init__(self, ttl_ms: int) -> None:
        if ttl_ms < 1:
            raise InvalidArgument("dedup ttl must be >= 1")
        self.ttl_ms = ttl_ms
        self.seen: dict[str, int] = {}

    def accept(self, sample_id: str, now: int) -> bool:
        """True if applied (first occurrence within the TTL), False for a duplicate."""
        first = self.seen.get(sample_id)
        if first is not None and now < first + self.ttl_ms:
            return False
        self.seen[sample_id] = now
        return True


def apply_samples(samples: Iterable[LabeledSample], lr: float, dedup_ttl_ms: int = 1 << 62) -> tuple[list[ResultRow], dict[str, UserEmbedding]]:
    """Single-consumer reference sink: dedup then apply in the given order."""
    dedup = DedupState(dedup_ttl_ms)
    embs: dict[str, UserEmbedding] = {}
    rows: list[ResultRow] = []
    for s in samples:
        if not dedup.accept(s.sample_id, s.emit_time):
            continue
        emb = apply_update(embs.get(s.user_id) or UserEmbedding(s.user_id), s, lr)
        embs[s.user_id] = emb
        rows.append(ResultRow(s.sample_id, s.user_id, emb.version, s.labels.bits()))
    return rows, embs


def write_results(path, rows: Iterable[ResultRow]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for r in rows:
            fh.write(r.line() + "\n")
            n += 1
    return n


_EMB_CODEC = Codec(lambda e: e.to_bytes(), lambda b: UserEmbedding.from_bytes("", b))
_COUNTS = array_of(INT64)


class SinkProcessor(KeyedProcessor):
    """Keyed by user id. Results and update logs live outside the lane and are cut back on restore."""

    key_codec = STRING_CODEC

    def __init__(self, lane_name: str, lr: float, dedup_ttl_ms: int, results: list[ResultRow], updates: list[UpdateRecord]) -> None:
        if not 0.0 < lr < 1.0:
            raise InvalidArgument(f"learning rate must be in (0, 1), got {lr}")
        self.lane_name = lane_name
        self.lr = lr
        self.ttl = dedup_ttl_ms
        self.results = results
        self.updates = updates
        self.state_descriptors = (
            StateDescriptor("seen", "map", dedup_ttl_ms, INT_CODEC),
            StateDescriptor("embedding", "value", None, _EMB_CODEC),
        )

    def process_element(self, side: int, sample: LabeledSample, ctx: Context) -> None:
        seen = ctx.map_state("seen")
        if seen.contains(sample.sample_id):
            ctx.count("duplicate_samples")
            return
        seen.put(sample.sample_id, 0, ts=sample.emit_time)
        ctx.register_timer(sample.emit_time + self.ttl)
        state = ctx.value_state("embedding")
        cur = state.get()
        emb = UserEmbedding(sample.user_id) if cur is None else UserEmbedding(sample.user_id, cur.vector, cur.version)
        new = apply_update(emb, sample, self.lr)
        state.set(new)
        self.updates.append(UpdateRecord(self.lane_name, sample.user_id, emb.version, new.version))
        self.results.append(ResultRow(sample.sample_id, sample.user_id, new.version, sample.labels.bits()))
        ctx.count("applied")

    def on_timer(self, fire_time: int, ctx: Context) -> None:
        ctx.map_state("seen").pop_expired()

    def snapshot_extra(self) -> bytes:
        return encode_value(_COUNTS, [len(self.results), len(self.updates)])

    def restore_extra(self, data: bytes) -> None:
        if data:
            nr, nu = decode_value(_COUNTS, data)
            del self.results[nr:]
            del self.updates[nu:]


# -- consumer pods sharing one embedding store --------------------------------------------


@dataclass
class PodRun:
    updates: list[UpdateRecord]
    embeddings: dict[str, UserEmbedding]
    reassignments: int


def simulate_pods(
    samples: Sequence[LabeledSample],
    consumers: int = 2,
    partitions: int = 8,
    mode: str = "affinity",
    lr: float = 0.1,
    service_ms: int = 4,
    prefetch: int = 32,
    reassign_every: int = 500,
    seed: int = 0,
) -> PodRun:
    """Consumers applying updates to a shared store with a non-atomic read-modify-write.

    Samples are partitioned by user. Each consumer fetches up to ``prefetch``
    records from the partitions it owns and applies them one at a time: it
    reads the user's embedding when it starts and writes it back
    ``service_ms`` later. In ``affinity`` mode the assignment is sticky for
    the whole run. In ``reassign`` mode the partition owners are shuffled
    every ``reassign_every`` fetched records and a consumer keeps working
    through what it already prefetched, as a consumer does when it is not
    told about a rebalance in time.
    """
    if mode not in ("affinity", "reassign"):
        raise InvalidArgument(f"mode must be 'affinity' or 'reassign', got {mode!r}")
    if consumers < 1 or partitions < 1 or prefetch < 1 or service_ms < 1:
        raise InvalidArgument("consumers, partitions, prefetch and service_ms must be >= 1")
    rng = random.Random(seed)
    names = [f"pod-{i}" for i in range(consumers)]
    queues: list[deque[LabeledSample]] = [deque() for _ in range(partitions)]
    for s in samples:
        queues[partition_for(s.user_id.encode("utf-8"), partitions)].append(s)
    owner = sticky_assignment(partitions, names)
    buffers: list[deque[LabeledSample]] = [deque() for _ in names]
    busy: list[tuple[int, LabeledSample, UserEmbedding] | None] = [None] * consumers
    store: dict[str, UserEmbedding] = {}
    log: list[UpdateRecord] = []
    fetched = 0
    reassignments = 0
    now = 0

    def fetch(ci: int) -> None:
        nonlocal fetched, owner, reassignments
        mine = [p for p in range(partitions) if owner[p] == names[ci]]
        while len(buffers[ci]) < prefetch and any(queues[p] for p in mine):
            for p in mine:
                if queues[p] and len(buffers[ci]) < prefetch:
                    buffers[ci].append(queues[p].popleft())
                    fetched += 1
                    if mode == "reassign" and fetched % reassign_every == 0:
                        shuffled = names[:]
                        owner = {q: rng.choice(shuffled) for q in range(partitions)}
                        reassignments += 1
                        return

    while True:
        for ci in range(consumers):
            job = busy[ci]
            if job is not None and job[0] <= now:
                _, s, read = job
                new = apply_update(read, s, lr)
                store[s.user_id] = new
                log.append(UpdateRecord(names[ci], s.user_id, read.version, new.version))
                busy[ci] = None
        for ci in range(consumers):
            if busy[ci] is None:
                if not buffers[ci]:
                    fetch(ci)
                if buffers[ci]:
                    s = buffers[ci].popleft()
                    read = store.get(s.user_id) or UserEmbedding(s.user_id)
                    busy[ci] = (now + service_ms, s, read)
        if all(b is None for b in busy) and not any(buffers) and not any(queues):
            break
        now += 1
    return PodRun(log, store, reassignments)
