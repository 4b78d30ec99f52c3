"""Partitioned, offset-addressed log with retention, replay and consumer groups.

Consuming never deletes: a partition only shrinks when records age out of
the retention window. Each partition is an append-only list guarded by its
own lock, so appends to different partitions do not contend.

Optional persistence writes one file per partition, a sequence of
``[u32 LE length][uvarint offset, key, value, uvarint append_time]`` entries,
and reloads it when a store is opened on the same directory.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

from streamjoin.codec.schema import read_uvarint, write_uvarint
from streamjoin.errors import (
    AlreadyExists,
    DecodeError,
    InvalidArgument,
    NotFound,
    OffsetOutOfRange,
)
from streamjoin.model import fnv1a64

log = logging.getLogger(__name__)

_U32 = struct.Struct("<I")


class LogRecord(NamedTuple):
    offset: int
    key: bytes
    value: bytes
    append_time: int


@dataclass(frozen=True)
class Topic:
    name: str
    partition_count: int
    retention_ms: int


@dataclass
class ConsumerGroup:
    group_id: str
    committed: dict[tuple[str, int], int] = field(default_factory=dict)
    assignment: dict[int, str] = field(default_factory=dict)


class _Partition:
    __slots__ = ("records", "floor", "lock", "file")

    def __init__(self) -> None:
        self.records: list[LogRecord] = []
        self.floor = 0  # first retained offset
        self.lock = threading.Lock()
        self.file = None

    @property
    def end(self) -> int:
        return self.floor + len(self.records)


def partition_for(key: bytes, partition_count: int) -> int:
    if partition_count < 1:
        raise InvalidArgument("partition_count must be >= 1")
    return fnv1a64(key) % partition_count


def sticky_assignment(partition_count: int, consumers: Sequence[str]) -> dict[int, str]:
    """Partition ``p`` goes to ``sorted(consumers)[p % n]``."""
    if not consumers:
        raise InvalidArgument("consumer list must be non-empty")
    if partition_count < 1:
        raise InvalidArgument("partition_count must be >= 1")
    ordered = sorted(consumers)
    return {p: ordered[p % len(ordered)] for p in range(partition_count)}


def _encode_entry(rec: LogRecord) -> bytes:
    buf = bytearray()
    write_uvarint(buf, rec.offset)
    write_uvarint(buf, len(rec.key))
    buf += rec.key
    write_uvarint(buf, len(rec.value))
    buf += rec.value
    write_uvarint(buf, rec.append_time)
    return _U32.pack(len(buf)) + bytes(buf)


def _read_entries(data: bytes) -> list[LogRecord]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("partition file ends inside a length prefix")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        end = pos + n
        if end > len(data):
            raise DecodeError("partition file ends inside a record")
        body = data[pos:end]
        offset, i = read_uvarint(body, 0)
        klen, i = read_uvarint(body, i)
        key = body[i : i + klen]
        i += klen
        vlen, i = read_uvarint(body, i)
        value = body[i : i + vlen]
        i += vlen
        append_time, i = read_uvarint(body, i)
        if i != n or len(key) != klen or len(value) != vlen:
            raise DecodeError("malformed partition file record")
        out.append(LogRecord(offset, bytes(key), bytes(value), append_time))
        pos = end
    return out


class LogStore:
    def __init__(self, directory: str | Path | None = None) -> None:
        self._topics: dict[str, Topic] = {}
        self._partitions: dict[str, list[_Partition]] = {}
        self._groups: dict[str, ConsumerGroup] = {}
        self._meta_lock = threading.Lock()
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- topics ---------------------------------------------------------------

    def create_topic(self, name: str, partitions: int, retention_ms: int) -> Topic:
        if not name:
            raise InvalidArgument("topic name must be non-empty")
        if partitions < 1:
            raise InvalidArgument("partitions must be >= 1")
        if retention_ms < 1:
            raise InvalidArgument("retention_ms must be >= 1")
        with self._meta_lock:
            if name in self._topics:
                raise AlreadyExists(f"topic {name!r} already exists")
            topic = Topic(name, partitions, retention_ms)
            self._topics[name] = topic
            self._partitions[name] = [_Partition() for _ in range(partitions)]
            if self.directory is not None:
                self._write_meta()
        return topic

    def topic(self, name: str) -> Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise NotFound(f"unknown topic {name!r}") from None

    def topics(self) -> list[Topic]:
        return list(self._topics.values())

    def _partition(self, topic: str, partition: int) -> _Partition:
        parts = self._partitions.get(topic)
        if parts is None:
            raise NotFound(f"unknown topic {topic!r}")
        if not 0 <= partition < len(parts):
            raise InvalidArgument(f"partition {partition} out of range for {topic!r}")
        return parts[partition]

    # -- data path -------------------------------------------------------------

    def append(self, topic: str, key: bytes, value: bytes, append_time: int = 0) -> tuple[int, int]:
        t = self.topic(topic)
        p = partition_for(key, t.partition_count)
        return p, self.append_to(topic, p, key, value, append_time)

    def append_to(self, topic: str, partition: int, key: bytes, value: bytes, append_time: int = 0) -> int:
        part = self._partition(topic, partition)
        if append_time < 0:
            raise InvalidArgument("append_time must be non-negative")
        with part.lock:
            if part.records and append_time < part.records[-1].append_time:
                raise InvalidArgument("append_time went backwards within a partition")
            rec = LogRecord(part.end, bytes(key), bytes(value), append_time)
            part.records.append(rec)
            if part.file is not None:
                part.file.write(_encode_entry(rec))
            return rec.offset

    def read(self, topic: str, partition: int, from_offset: int, max_records: int) -> list[LogRecord]:
        part = self._partition(topic, partition)
        if max_records < 0:
            raise InvalidArgument("max_records must be non-negative")
        with part.lock:
            records, floor = part.records, part.floor
        if from_offset < floor:
            raise OffsetOutOfRange(f"offset {from_offset} below retention floor {floor} of {topic}/{partition}")
        i = from_offset - floor
        return records[i : i + max_records]

    def record_at(self, topic: str, partition: int, offset: int) -> LogRecord:
        recs = self.read(topic, partition, offset, 1)
        if not recs:
            raise OffsetOutOfRange(f"no record at {topic}/{partition}@{offset}")
        return recs[0]

    def end_offset(self, topic: str, partition: int) -> int:
        return self._partition(topic, partition).end

    def start_offset(self, topic: str, partition: int) -> int:
        return self._partition(topic, partition).floor

    def expire_segments(self, topic: str, now: int) -> int:
        """Drop the prefix of each partition older than the retention window."""
        t = self.topic(topic)
        cutoff = now - t.retention_ms
        purged = 0
        for idx, part in enumerate(self._partitions[topic]):
            with part.lock:
                n = 0
                for rec in part.records:
                    if rec.append_time >= cutoff:
                        break
                    n += 1
                if n:
                    part.records = part.records[n:]
                    part.floor += n
                    purged += n
                    if part.file is not None:
                        self._rewrite_partition(topic, idx, part)
        if purged and self.directory is not None:
            with self._meta_lock:
                self._write_meta()
        if purged:
            log.debug("expired %d records from %s (cutoff %d)", purged, topic, cutoff)
        return purged

    # -- consumer groups -------------------------------------------------------

    def _group(self, group: str) -> ConsumerGroup:
        with self._meta_lock:
            g = self._groups.get(group)
            if g is None:
                g = self._groups[group] = ConsumerGroup(group)
            return g

    def commit_offset(self, group: str, topic: str, partition: int, offset: int) -> None:
        end = self.end_offset(topic, partition)
        if not 0 <= offset <= end:
            raise InvalidArgument(f"commit offset {offset} outside [0, {end}] for {topic}/{partition}")
        g = self._group(group)
        with self._meta_lock:
            g.committed[(topic, partition)] = offset
            if self.directory is not None:
                self._write_meta()

    def fetch_committed(self, group: str, topic: str, partition: int) -> int:
        self._partition(topic, partition)
        g = self._groups.get(group)
        if g is None:
            return 0
        return g.committed.get((topic, partition), 0)

    def assign_partitions(self, group: str, topic: str, consumers: Sequence[str]) -> dict[int, str]:
        assignment = sticky_assignment(self.topic(topic).partition_count, consumers)
        g = self._group(group)
        with self._meta_lock:
            g.assignment = dict(assignment)
        return assignment

    def group(self, group: str) -> ConsumerGroup:
        return self._group(group)

    # -- persistence -----------------------------------------------------------

    def _part_path(self, topic: str, idx: int) -> Path:
        assert self.directory is not None
        return self.directory / f"{topic}-{idx}.log"

    def _write_meta(self) -> None:
        assert self.directory is not None
        meta = {
            "topics": [[t.name, t.partition_count, t.retention_ms] for t in self._topics.values()],
            "floors": {name: [p.floor for p in parts] for name, parts in self._partitions.items()},
            "groups": {
                g.group_id: [[tp, p, off] for (tp, p), off in sorted(g.committed.items())]
                for g in self._groups.values()
            },
        }
        tmp = self.directory / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, sort_keys=True))
        tmp.replace(self.directory / "meta.json")
        for t in self._topics.values():
            for idx, part in enumerate(self._partitions[t.name]):
                if part.file is None:
                    part.file = open(self._part_path(t.name, idx), "ab", buffering=0)

    def _rewrite_partition(self, topic: str, idx: int, part: _Partition) -> None:
        part.file.close()
        path = self._part_path(topic, idx)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(b"".join(_encode_entry(r) for r in part.records))
        tmp.replace(path)
        part.file = open(path, "ab", buffering=0)

    def _load(self) -> None:
        assert self.directory is not None
        meta_path = self.directory / "meta.json"
        if not meta_path.exists():
            return
        meta = json.loads(meta_path.read_text())
        for name, count, retention in meta["topics"]:
            self._topics[name] = Topic(name, count, retention)
            parts = []
            for idx in range(count):
                part = _Partition()
                path = self._part_path(name, idx)
                if path.exists():
                    part.records = _read_entries(path.read_bytes())
                floors = meta.get("floors", {}).get(name)
                part.floor = part.records[0].offset if part.records else (floors[idx] if floors else 0)
                parts.append(part)
            self._partitions[name] = parts
        for gid, entries in meta.get("groups", {}).items():
            g = self._groups[gid] = ConsumerGroup(gid)
            for tp, p, off in entries:
                g.committed[(tp, p)] = off
        self._write_meta()

    def close(self) -> None:
        for parts in self._partitions.values():
            for part in parts:
                if part.file is not None:
                    part.file.close()
                    part.file = None
