"""Event-time stream join of views and engagements into labeled training samples."""

from streamjoin.model import (
    EngagementEvent,
    JoinKey,
    LabeledSample,
    LabelVector,
    SignalKind,
    ViewEvent,
    derive_sample_id,
    label_from_engagements,
)

__version__ = "0.1.0"

__all__ = [
    "EngagementEvent",
    "JoinKey",
    "LabelVector",
    "LabeledSample",
    "SignalKind",
    "ViewEvent",
    "derive_sample_id",
    "label_from_engagements",
]
