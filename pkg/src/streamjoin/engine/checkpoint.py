"""Checkpoint files.

Layout::

    CF 01 | uvarint checkpoint_id
          | uvarint n, n x (string topic, uvarint partition, uvarint offset)
          | uvarint m, m x (uvarint len, operator blob)
          | uvarint len, sink blob

Strings are uvarint length + UTF-8. Operator blobs are ``OPERATOR_SCHEMA``
records in the binary record encoding. Their state entries and timers are
packed into one bytes field each: entries as uvarint-length-prefixed
``ENTRY_SCHEMA`` records, timers as ``zigzag varint fire_time, uvarint
length, key bytes``. The sink blob is a ``SINK_SCHEMA`` record holding the
sink stage's operator blobs. A plain-text manifest next to the files lists
one completed checkpoint per line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from streamjoin.codec.schema import (
    BYTES,
    INT64,
    STRING,
    Schema,
    array_of,
    decode_binary,
    read_uvarint,
    unzigzag,
    write_uvarint,
)
from streamjoin.errors import DecodeError, RestoreFailed

log = logging.getLogger(__name__)

MAGIC = b"\xcf\x01"

OPERATOR_SCHEMA = Schema(
    21,
    (
        ("operator", STRING),
        ("lane", INT64),
        ("watermark", INT64),
        ("channel_watermarks", array_of(INT64)),
        ("timer_count", INT64),
        ("timers", BYTES),
        ("entry_count", INT64),
        ("entries", BYTES),
        ("metric_names", array_of(STRING)),
        ("metric_values", array_of(INT64)),
        ("dead_letters", INT64),
        ("extra", BYTES),
    ),
    name="operator_state",
)

SINK_SCHEMA = Schema(22, (("lanes", array_of(BYTES)),), name="sink_state")


def split_entries(data: bytes, count: int) -> list[bytes]:
    out = []
    pos = 0
    for _ in range(count):
        n, pos = read_uvarint(data, pos)
        if pos + n > len(data):
            raise DecodeError("state entry runs past the end of its chunk")
        out.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} stray bytes after {count} state entries")
    return out


def split_timers(data: bytes, count: int) -> list[tuple[int, bytes]]:
    out = []
    pos = 0
    for _ in range(count):
        z, pos = read_uvarint(data, pos)
        n, pos = read_uvarint(data, pos)
        if pos + n > len(data):
            raise DecodeError("timer key runs past the end of its chunk")
        out.append((unzigzag(z), data[pos : pos + n]))
        pos += n
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} stray bytes after {count} timers")
    return out


def decode_operator(blob: bytes) -> dict:
    """An operator record with its timers and entries unpacked into lists."""
    st = decode_binary(blob, OPERATOR_SCHEMA)
    timers = split_timers(st.pop("timers"), st.pop("timer_count"))
    st["timer_times"] = [t for t, _ in timers]
    st["timer_keys"] = [k for _, k in timers]
    st["entries"] = split_entries(st["entries"], st.pop("entry_count"))
    return st


@dataclass
class Checkpoint:
    checkpoint_id: int
    source_offsets: list[tuple[str, int, int]] = field(default_factory=list)
    operator_blobs: list[bytes] = field(default_factory=list)
    sink_blob: bytes = b""

    def offsets(self) -> dict[tuple[str, int], int]:
        return {(t, p): o for t, p, o in self.source_offsets}


def _put_bytes(buf: bytearray, b: bytes) -> None:
    write_uvarint(buf, len(b))
    buf += b


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    write_uvarint(buf, ckpt.checkpoint_id)
    write_uvarint(buf, len(ckpt.source_offsets))
    for topic, partition, offset in ckpt.source_offsets:
        _put_bytes(buf, topic.encode("utf-8"))
        write_uvarint(buf, partition)
        write_uvarint(buf, offset)
    write_uvarint(buf, len(ckpt.operator_blobs))
    for blob in ckpt.operator_blobs:
        _put_bytes(buf, blob)
    _put_bytes(buf, ckpt.sink_blob)
    return bytes(buf)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse a checkpoint file; any defect raises ``RestoreFailed``."""
    try:
        if data[:2] != MAGIC:
            raise RestoreFailed(f"bad checkpoint magic {bytes(data[:2]).hex() or '(empty)'}")
        pos = 2

        def take(pos: int) -> tuple[bytes, int]:
            n, pos = read_uvarint(data, pos)
            if pos + n > len(data):
                raise RestoreFailed(f"checkpoint truncated: need {n} bytes at {pos}, have {len(data) - pos}")
            return bytes(data[pos : pos + n]), pos + n

        cid, pos = read_uvarint(data, pos)
        n, pos = read_uvarint(data, pos)
        offsets = []
        for _ in range(n):
            tb, pos = take(pos)
            part, pos = read_uvarint(data, pos)
            off, pos = read_uvarint(data, pos)
            offsets.append((tb.decode("utf-8"), part, off))
        m, pos = read_uvarint(data, pos)
        blobs = []
        for _ in range(m):
            b, pos = take(pos)
            blobs.append(b)
        sink, pos = take(pos)
        if pos != len(data):
            raise RestoreFailed(f"{len(data) - pos} trailing bytes after checkpoint")
        ckpt = Checkpoint(cid, offsets, blobs, sink)
        for blob in blobs:
            decode_operator(blob)
        if sink:
            for blob in decode_binary(sink, SINK_SCHEMA)["lanes"]:
                decode_operator(blob)
        return ckpt
    except RestoreFailed:
        raise
    except (DecodeError, UnicodeDecodeError) as exc:
        raise RestoreFailed(f"corrupt checkpoint: {exc}") from exc


def operator_states(ckpt: Checkpoint) -> list[dict]:
    """Decoded operator records, including the sink stage's."""
    states = [decode_operator(b) for b in ckpt.operator_blobs]
    if ckpt.sink_blob:
        states += [decode_operator(b) for b in decode_binary(ckpt.sink_blob, SINK_SCHEMA)["lanes"]]
    return states


def summarize(ckpt: Checkpoint) -> dict:
    out: dict = {
        "checkpoint_id": ckpt.checkpoint_id,
        "sources": len(ckpt.source_offsets),
        "source_records": sum(o for _, _, o in ckpt.source_offsets),
        "operators": [],
    }
    for st in operator_states(ckpt):
        out["operators"].append(
            {
                "operator": st["operator"],
                "lane": st["lane"],
                "watermark": st["watermark"],
                "timers": len(st["timer_times"]),
                "entries": len(st["entries"]),
                "metrics": dict(zip(st["metric_names"], st["metric_values"])),
            }
        )
    return out


class CheckpointStore:
    """Keeps the latest completed checkpoint; with a directory, also files and a manifest."""

    def __init__(self, directory: str | Path | None = None, keep: int = 2) -> None:
        self.directory = Path(directory) if directory is not None else None
        self.keep = keep
        self.latest: bytes | None = None
        self.latest_id: int | None = None
        self.completed: list[int] = []
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def save(self, ckpt: Checkpoint) -> bytes:
        data = encode_checkpoint(ckpt)
        self.latest = data
        self.latest_id = ckpt.checkpoint_id
        self.completed.append(ckpt.checkpoint_id)
        if self.directory is not None:
            path = self.directory / f"chk-{ckpt.checkpoint_id:06d}.bin"
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
            records = sum(o for _, _, o in ckpt.source_offsets)
            with open(self.directory / "MANIFEST", "a", encoding="utf-8") as fh:
                fh.write(
                    f"checkpoint_id={ckpt.checkpoint_id} path={path.name} source_records={records} "
                    f"operators={len(ckpt.operator_blobs)} bytes={len(data)}\n"
                )
            old = self.completed[: -self.keep] if self.keep > 0 else []
            for cid in old:
                (self.directory / f"chk-{cid:06d}.bin").unlink(missing_ok=True)
        return data

    def load_latest(self) -> Checkpoint | None:
        if self.latest is None:
            return None
        return decode_checkpoint(self.latest)


def read_checkpoint_file(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise RestoreFailed(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
