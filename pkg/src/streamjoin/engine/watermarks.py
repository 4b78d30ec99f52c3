"""Bounded-out-of-orderness watermarks and min-merging across inputs."""

from __future__ import annotations

from typing import Iterable, Sequence

from streamjoin.errors import InvalidArgument

NO_WATERMARK = -1
MAX_WATERMARK = (1 << 63) - 1


class WatermarkGenerator:
    """Watermark of one partition: ``max(previous, max_event_time_seen - delay)``, floored at 0."""

    __slots__ = ("delay_ms", "max_seen", "current")

    def __init__(self, delay_ms: int) -> None:
        if delay_ms < 0:
            raise InvalidArgument("watermark delay must be non-negative")
        self.delay_ms = delay_ms
        self.max_seen = NO_WATERMARK
        self.current = NO_WATERMARK

    def observe(self, event_time: int) -> int:
        if event_time > self.max_seen:
            self.max_seen = event_time
            candidate = max(0, event_time - self.delay_ms)
            if candidate > self.current:
                self.current = candidate
        return self.current


def generate_watermarks(event_times: Iterable[int], delay_ms: int) -> list[tuple[int, int | None]]:
    """Pair each event time with the watermark emitted after it, or ``None`` if it did not advance."""
    gen = WatermarkGenerator(delay_ms)
    out: list[tuple[int, int | None]] = []
    for t in event_times:
        before = gen.current
        after = gen.observe(t)
        out.append((t, after if after > before else None))
    return out


def merge_watermarks(inputs: Sequence[int]) -> int:
    if not inputs:
        raise InvalidArgument("need at least one input watermark")
    return min(inputs)
