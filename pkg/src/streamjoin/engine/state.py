"""Keyed state (value and map slots with TTL) and the event-time timer queue.

All state is scoped to the key currently being processed. TTL is measured
against the operator watermark: an entry stamped ``ts`` with ``ttl`` is
readable while ``watermark < ts + ttl`` and observably absent from then on.
Expired entries stay in memory until taken with ``pop_expired`` or
overwritten, so an operator can still account for what it let expire.

Every entry caches its encoded form. A snapshot only encodes entries written
since the previous one.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Any, Callable, Generic, Hashable, Iterator, TypeVar

from streamjoin.codec.schema import (
    BYTES,
    INT64,
    STRING,
    FieldKind,
    Schema,
    array_of,
    decode_binary,
    decode_value,
    encode_binary,
    encode_value,
    optional_of,
    uvarint,
    zigzag,
)
from streamjoin.engine.watermarks import NO_WATERMARK
from streamjoin.errors import InvalidArgument, InvalidState

T = TypeVar("T")


@dataclass(frozen=True)
class Codec(Generic[T]):
    encode: Callable[[T], bytes]
    decode: Callable[[bytes], T]


def kind_codec(kind: FieldKind) -> Codec:
    return Codec(lambda v: encode_value(kind, v), lambda b: decode_value(kind, b))


STRING_CODEC = kind_codec(STRING)
INT_CODEC = kind_codec(INT64)
BYTES_CODEC = Codec(bytes, bytes)
_STR_ARRAY = array_of(STRING)
STRING_TUPLE_CODEC = Codec(lambda k: encode_value(_STR_ARRAY, list(k)), lambda b: tuple(decode_value(_STR_ARRAY, b)))


@dataclass(frozen=True)
class StateDescriptor:
    name: str
    kind: str = "value"  # "value" or "map"
    ttl_ms: int | None = None
    value_codec: Codec = INT_CODEC
    map_key_codec: Codec = STRING_CODEC

    def __post_init__(self) -> None:
        if self.kind not in ("value", "map"):
            raise InvalidArgument(f"state kind must be 'value' or 'map', got {self.kind!r}")
        if self.ttl_ms is not None and self.ttl_ms < 1:
            raise InvalidArgument("ttl_ms must be >= 1")


ENTRY_SCHEMA = Schema(
    20,
    (
        ("slot", INT64),
        ("key", BYTES),
        ("map_key", optional_of(BYTES)),
        ("ts", INT64),
        ("value", BYTES),
    ),
    name="state_entry",
)


class _Entry:
    __slots__ = ("value", "ts", "blob", "chunk")

    def __init__(self, value: Any, ts: int, blob: bytes | None = None) -> None:
        self.value = value
        self.ts = ts
        self.blob = blob
        self.chunk: bytes | None = None  # blob with its length prefix


class KeyedStateBackend:
    def __init__(self, descriptors: tuple[StateDescriptor, ...] | list[StateDescriptor], key_codec: Codec) -> None:
        names = [d.name for d in descriptors]
        if len(set(names)) != len(names):
            raise InvalidArgument("state names must be unique")
        self.descriptors = tuple(descriptors)
        self.index = {d.name: i for i, d in enumerate(self.descriptors)}
        self.key_codec = key_codec
        self.slots: list[dict] = [{} for _ in self.descriptors]
        self.watermark = NO_WATERMARK
        self.current_key: Hashable | None = None
        self._key_bytes: dict[Hashable, bytes] = {}

    def _require_key(self) -> Hashable:
        if self.current_key is None:
            raise InvalidState("keyed state accessed outside a keyed callback")
        return self.current_key

    def _now_ts(self, ts: int | None) -> int:
        return ts if ts is not None else max(self.watermark, 0)

    def alive(self, desc: StateDescriptor, entry: _Entry) -> bool:
        return desc.ttl_ms is None or self.watermark < entry.ts + desc.ttl_ms

    def value(self, name: str) -> ValueState:
        return ValueState(self, self.index[name])

    def map(self, name: str) -> MapState:
        return MapState(self, self.index[name])

    def key_count(self) -> int:
        return len({k for slot in self.slots for k in slot})

    def entry_count(self) -> int:
        n = 0
        for desc, slot in zip(self.descriptors, self.slots):
            n += len(slot) if desc.kind == "value" else sum(len(m) for m in slot.values())
        return n

    def _kb(self, key: Hashable) -> bytes:
        kb = self._key_bytes.get(key)
        if kb is None:
            kb = self._key_bytes[key] = self.key_codec.encode(key)
        return kb

    def _blob(self, slot: int, key: Hashable, mk: Any, entry: _Entry) -> bytes:
        if entry.blob is None:
            desc = self.descriptors[slot]
            entry.blob = encode_binary(
                {
                    "slot": slot,
                    "key": self._kb(key),
                    "map_key": None if mk is None else desc.map_key_codec.encode(mk),
                    "ts": entry.ts,
                    "value": desc.value_codec.encode(entry.value),
                },
                ENTRY_SCHEMA,
            )
        return entry.blob

    def _entries(self) -> Iterator[tuple[int, Hashable, Any, _Entry]]:
        for slot, (desc, data) in enumerate(zip(self.descriptors, self.slots)):
            if desc.kind == "value":
                for key, entry in data.items():
                    yield slot, key, None, entry
            else:
                for key, entries in data.items():
                    for mk, entry in entries.items():
                        yield slot, key, mk, entry

    def snapshot(self) -> list[bytes]:
        """Encoded entries, expired ones included (they are still owed a cleanup)."""
        return [e.blob if e.blob is not None else self._blob(s, k, mk, e) for s, k, mk, e in self._entries()]

    def snapshot_chunk(self) -> tuple[int, bytes]:
        """``(count, concatenation of length-prefixed entries)``, reusing unchanged encodings."""
        parts = []
        add = parts.append
        for slot, key, mk, e in self._entries():
            c = e.chunk
            if c is None:
                b = e.blob if e.blob is not None else self._blob(slot, key, mk, e)
                c = e.chunk = uvarint(len(b)) + b
            add(c)
        return len(parts), b"".join(parts)

    def restore(self, blobs: list[bytes], watermark: int) -> None:
        self.slots = [{} for _ in self.descriptors]
        self._key_bytes = {}
        self.watermark = watermark
        keys: dict[bytes, Hashable] = {}
        for blob in blobs:
            rec = decode_binary(blob, ENTRY_SCHEMA)
            slot = rec["slot"]
            if not 0 <= slot < len(self.descriptors):
                raise InvalidState(f"state entry for unknown slot {slot}")
            desc = self.descriptors[slot]
            kb = rec["key"]
            key = keys.get(kb)
            if key is None:
                key = keys[kb] = self.key_codec.decode(kb)
                self._key_bytes[key] = kb
            entry = _Entry(desc.value_codec.decode(rec["value"]), rec["ts"], blob)
            if desc.kind == "value":
                self.slots[slot][key] = entry
            else:
                if rec["map_key"] is None:
                    raise InvalidState(f"map slot {desc.name!r} entry without a map key")
                self.slots[slot].setdefault(key, {})[desc.map_key_codec.decode(rec["map_key"])] = entry

    def _forget_key_if_empty(self, key: Hashable) -> None:
        for slot in self.slots:
            if key in slot:
                return
        self._key_bytes.pop(key, None)


class ValueState:
    __slots__ = ("_b", "_slot", "_desc")

    def __init__(self, backend: KeyedStateBackend, slot: int) -> None:
        self._b = backend
        self._slot = slot
        self._desc = backend.descriptors[slot]
        if self._desc.kind != "value":
            raise InvalidArgument(f"state {self._desc.name!r} is not a value slot")

    def get(self, default: Any = None) -> Any:
        entry = self._b.slots[self._slot].get(self._b._require_key())
        if entry is None or not self._b.alive(self._desc, entry):
            return default
        return entry.value

    def set(self, value: Any, ts: int | None = None) -> None:
        self._b.slots[self._slot][self._b._require_key()] = _Entry(value, self._b._now_ts(ts))

    def clear(self) -> None:
        key = self._b._require_key()
        if self._b.slots[self._slot].pop(key, None) is not None:
            self._b._forget_key_if_empty(key)


class MapState:
    """Per-key map. Values are treated as immutable: write back with ``put`` after a change."""

    __slots__ = ("_b", "_slot", "_desc")

    def __init__(self, backend: KeyedStateBackend, slot: int) -> None:
        self._b = backend
        self._slot = slot
        self._desc = backend.descriptors[slot]
        if self._desc.kind != "map":
            raise InvalidArgument(f"state {self._desc.name!r} is not a map slot")

    def _entries(self, create: bool = False) -> dict | None:
        key = self._b._require_key()
        slot = self._b.slots[self._slot]
        entries = slot.get(key)
        if entries is None and create:
            entries = slot[key] = {}
        return entries

    def get(self, map_key: Any, default: Any = None) -> Any:
        entries = self._entries()
        if not entries:
            return default
        entry = entries.get(map_key)
        if entry is None or not self._b.alive(self._desc, entry):
            return default
        return entry.value

    def contains(self, map_key: Any) -> bool:
        sentinel = object()
        return self.get(map_key, sentinel) is not sentinel

    def put(self, map_key: Any, value: Any, ts: int | None = None) -> None:
        self._entries(create=True)[map_key] = _Entry(value, self._b._now_ts(ts))

    def remove(self, map_key: Any) -> Any:
        entries = self._entries()
        if not entries:
            return None
        entry = entries.pop(map_key, None)
        if not entries:
            self._drop_key()
        return None if entry is None else entry.value

    def _drop_key(self) -> None:
        key = self._b._require_key()
        self._b.slots[self._slot].pop(key, None)
        self._b._forget_key_if_empty(key)

    def items(self) -> Iterator[tuple[Any, Any]]:
        entries = self._entries()
        if not entries:
            return iter(())
        alive = self._b.alive
        desc = self._desc
        return iter([(mk, e.value) for mk, e in entries.items() if alive(desc, e)])

    def timestamped(self) -> list[tuple[Any, Any, int]]:
        entries = self._entries()
        if not entries:
            return []
        return [(mk, e.value, e.ts) for mk, e in entries.items() if self._b.alive(self._desc, e)]

    def is_empty(self) -> bool:
        return not any(True for _ in self.items())

    def pop_expired(self) -> list[tuple[Any, Any]]:
        """Remove and return the entries whose TTL has run out."""
        entries = self._entries()
        if not entries:
            return []
        alive = self._b.alive
        gone = [(mk, e.value) for mk, e in entries.items() if not alive(self._desc, e)]
        for mk, _ in gone:
            del entries[mk]
        if not entries:
            self._drop_key()
        return gone


class TimerService:
    """Event-time timers ordered by ``(fire_time, key)``; registration is idempotent.

    With ``encode_key`` each timer is also kept in its checkpoint form
    (zigzag varint fire time, uvarint key length, key bytes) from the moment
    it is registered.
    """

    def __init__(self, encode_key: Callable[[Hashable], bytes] | None = None) -> None:
        self._heap: list[tuple[int, Hashable]] = []
        self._wire: dict[tuple[int, Hashable], bytes | None] = {}
        self._encode_key = encode_key

    def __len__(self) -> int:
        return len(self._heap)

    def _encode(self, entry: tuple[int, Hashable]) -> bytes | None:
        if self._encode_key is None:
            return None
        kb = self._encode_key(entry[1])
        return uvarint(zigzag(entry[0])) + uvarint(len(kb)) + kb

    def register(self, key: Hashable, fire_time: int) -> bool:
        entry = (fire_time, key)
        if entry in self._wire:
            return False
        self._wire[entry] = self._encode(entry)
        heapq.heappush(self._heap, entry)
        return True

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def pop_before(self, watermark: int) -> tuple[int, Hashable] | None:
        """Next timer with ``fire_time < watermark``, or None."""
        if self._heap and self._heap[0][0] < watermark:
            entry = heapq.heappop(self._heap)
            del self._wire[entry]
            return entry
        return None

    def entries(self) -> list[tuple[int, Hashable]]:
        return sorted(self._heap)

    def encoded(self) -> tuple[int, bytes]:
        """``(count, concatenated checkpoint forms)`` in firing order."""
        if self._encode_key is None:
            raise InvalidState("timer service has no key encoder")
        self._heap.sort()  # a sorted list is still a valid heap
        return len(self._heap), b"".join(map(self._wire.__getitem__, self._heap))

    def restore(self, entries: list[tuple[int, Hashable]]) -> None:
        self._heap = sorted(entries)
        self._wire = {e: self._encode(e) for e in self._heap}
