"""Domain types shared by every stage of the pipeline.

Times are integer milliseconds on a simulated clock. Event time is when
something happened at the source; processing time is when a stage handled
it. Nothing in the package reads the wall clock.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple, Tuple, Union

from streamjoin.errors import InvalidArgument

EventTime = int
ProcessingTime = int

FieldValue = Union[int, float, str, bool, list, tuple, None]
Payload = Tuple[Tuple[str, FieldValue], ...]

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET_BASIS
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


class SignalKind(IntEnum):
    """Engagement signals. Codes are a wire contract: append only."""

    LIKE = 0
    SHARE = 1
    COMMENT = 2
    FAVORITE = 3
    CLICK = 4
    VIDEO_PLAY = 5
    SKIP = 6


class LabelVector(NamedTuple):
    """One binary label per signal kind, indexable by ``SignalKind``."""

    like: int = 0
    share: int = 0
    comment: int = 0
    favorite: int = 0
    click: int = 0
    video_play: int = 0
    skip: int = 0

    @property
    def mask(self) -> int:
        m = 0
        for i, bit in enumerate(self):
            if bit:
                m |= 1 << i
        return m

    @classmethod
    def from_mask(cls, mask: int) -> LabelVector:
        if mask < 0 or mask >= 1 << len(SignalKind):
            raise InvalidArgument(f"label mask out of range: {mask}")
        return cls(*((mask >> i) & 1 for i in range(len(SignalKind))))

    def bits(self) -> str:
        """Labels as a string of 0/1 in signal-code order, e.g. ``"1000000"``."""
        return "".join(str(b) for b in self)

    @classmethod
    def from_bits(cls, bits: str) -> LabelVector:
        if len(bits) != len(SignalKind) or set(bits) - {"0", "1"}:
            raise InvalidArgument(f"bad label bits: {bits!r}")
        return cls(*(int(c) for c in bits))

    def any(self) -> bool:
        return any(self)


class JoinKey(NamedTuple):
    user_id: str
    post_id: str

    @classmethod
    def of(cls, event: ViewEvent | EngagementEvent) -> JoinKey:
        if not event.user_id or not event.post_id:
            raise InvalidArgument("join key fields must be non-empty")
        return cls(event.user_id, event.post_id)


@dataclass(frozen=True)
class ViewEvent:
    view_id: str
    user_id: str
    post_id: str
    event_time: EventTime
    payload: Payload = ()

    @property
    def key(self) -> JoinKey:
        return JoinKey(self.user_id, self.post_id)


@dataclass(frozen=True)
class EngagementEvent:
    engagement_id: str
    user_id: str
    post_id: str
    signal: SignalKind
    event_time: EventTime

    @property
    def key(self) -> JoinKey:
        return JoinKey(self.user_id, self.post_id)


Event = Union[ViewEvent, EngagementEvent]


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    view: ViewEvent
    labels: LabelVector
    emit_time: EventTime

    @property
    def user_id(self) -> str:
        return self.view.user_id

    def identity(self) -> tuple[str, str]:
        """What two pipelines must agree on: the id and the label bits."""
        return self.sample_id, self.labels.bits()


def derive_sample_id(view_id: str) -> str:
    """Deterministic sample id: 16 hex digits of FNV-1a 64 over the UTF-8 view id."""
    if not view_id:
        raise InvalidArgument("view_id must be non-empty")
    return format(fnv1a64(view_id.encode("utf-8")), "016x")


def label_from_engagements(signals: Iterable[SignalKind]) -> LabelVector:
    present = {SignalKind(s) for s in signals}
    return LabelVector(*(1 if k in present else 0 for k in SignalKind))


def make_sample(view: ViewEvent, signals: Iterable[SignalKind], emit_time: EventTime) -> LabeledSample:
    return LabeledSample(
        sample_id=derive_sample_id(view.view_id),
        view=view,
        labels=label_from_engagements(signals),
        emit_time=emit_time,
    )
