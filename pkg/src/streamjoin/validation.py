"""Shadow validation: run a keyed slice of traffic through two pipelines and diff their tables.

Both pipelines see the same users because the slice is chosen by a hash
threshold on the user id. Tables are compared on ``(sample_id, label bits)``;
emission time and embedding version are left out because the two approaches
legitimately differ there.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from streamjoin.errors import InputError, InvalidArgument
from streamjoin.join import JoinConfig, LateRecord, baseline_join
from streamjoin.model import JoinKey, ViewEvent, derive_sample_id
from streamjoin.pipeline import PipelineConfig, run_streaming
from streamjoin.sink import RESULTS_HEADER, ResultRow, apply_samples
from streamjoin.workload import GeneratedTrace, TraceRecord

log = logging.getLogger(__name__)

RAMP = (0.001, 0.01, 0.1, 1.0)
MAX_MISMATCHES = 100


def _parse_header(line: str) -> tuple[tuple[str, str], ...]:
    if not line.startswith("#"):
        raise InputError("results table has no header line")
    cols = []
    for part in line[1:].strip().split(","):
        name, sep, kind = part.partition(":")
        if not sep or not name or not kind:
            raise InputError(f"bad column declaration {part!r}")
        cols.append((name, kind))
    return tuple(cols)


EXPECTED_COLUMNS = _parse_header(RESULTS_HEADER)


@dataclass
class ResultsTable:
    columns: tuple[tuple[str, str], ...]
    rows: list[ResultRow]

    @classmethod
    def from_rows(cls, rows: Iterable[ResultRow]) -> ResultsTable:
        return cls(EXPECTED_COLUMNS, list(rows))

    def identities(self) -> set[tuple[str, str]]:
        return {(r.sample_id, r.labels) for r in self.rows}


def read_results(path: str | Path) -> ResultsTable:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read results table {path}: {exc}") from exc
    if not lines:
        raise InputError(f"results table {path} is empty")
    columns = _parse_header(lines[0])
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(columns):
            raise InputError(f"{path}:{n}: expected {len(columns)} fields, got {len(parts)}")
        try:
            rows.append(ResultRow(parts[0], parts[1], int(parts[2]), parts[3]))
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}:{n}: {exc}") from exc
    return ResultsTable(columns, rows)


@dataclass
class Mismatch:
    sample_id: str
    diffs: dict[str, tuple[str | None, str | None]]  # field -> (side a, side b)


@dataclass
class ComparisonReport:
    match_rate: float
    schema_ok: bool
    mismatches: list[Mismatch]
    mismatch_total: int
    count_a: int
    count_b: int
    matched: int

    @property
    def ok(self) -> bool:
        return self.match_rate == 1.0 and self.schema_ok

    def lines(self) -> list[str]:
        out = [
            f"match_rate={self.match_rate:.6f}",
            f"schema_ok={str(self.schema_ok).lower()}",
            f"rows_a={self.count_a}",
            f"rows_b={self.count_b}",
            f"matched={self.matched}",
            f"mismatches={self.mismatch_total}",
        ]
        for m in self.mismatches:
            diff = ";".join(f"{k}:{a}->{b}" for k, (a, b) in sorted(m.diffs.items()))
            out.append(f"mismatch {m.sample_id} {diff}")
        return out


def compare_tables(a: ResultsTable, b: ResultsTable, max_mismatches: int = MAX_MISMATCHES) -> ComparisonReport:
    """Jaccard match rate over ``(sample_id, label bits)`` plus a schema check."""
    ia, ib = a.identities(), b.identities()
    union = ia | ib
    both = ia & ib
    rate = len(both) / len(union) if union else 1.0
    labels_a: dict[str, set[str]] = {}
    labels_b: dict[str, set[str]] = {}
    for sid, bits in ia - both:
        labels_a.setdefault(sid, set()).add(bits)
    for sid, bits in ib - both:
        labels_b.setdefault(sid, set()).add(bits)
    diffs = []
    for sid in sorted(set(labels_a) | set(labels_b)):
        la = ",".join(sorted(labels_a.get(sid, ()))) or None
        lb = ",".join(sorted(labels_b.get(sid, ()))) or None
        diffs.append(Mismatch(sid, {"labels": (la, lb)}))
    return ComparisonReport(
        match_rate=rate,
        schema_ok=a.columns == b.columns,
        mismatches=diffs[:max_mismatches],
        mismatch_total=len(diffs),
        count_a=len(a.rows),
        count_b=len(b.rows),
        matched=len(both),
    )


# -- keyed traffic slicing ----------------------------------------------------------


def _check_fraction(fraction: float) -> None:
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")


def in_shadow(user_id: str, fraction: float) -> bool:
    """Whether a user's traffic is duplicated into the shadow slice."""
    _check_fraction(fraction)
    if fraction == 1.0:
        return True
    # FNV-1a leaves the high bits of short, similar ids poorly mixed; blake2b does not
    h = int.from_bytes(hashlib.blake2b(user_id.encode("utf-8"), digest_size=8, person=b"shadow").digest(), "big")
    return h < int(fraction * (1 << 64))


def shadow_slice(trace: GeneratedTrace, fraction: float) -> GeneratedTrace:
    _check_fraction(fraction)
    return trace.filter_users(lambda u: in_shadow(u, fraction))


Pipeline = Callable[[Sequence[TraceRecord]], list[ResultRow]]


def baseline_pipeline(join: JoinConfig, lr: float = 0.1) -> Pipeline:
    """The hold-and-cache joiner. Views wait ``W + watermark delay``; the cache keeps twice that."""
    hold = join.join_window_ms + join.watermark_delay_ms

    def run(records: Sequence[TraceRecord]) -> list[ResultRow]:
        samples = baseline_join(records, join.join_window_ms, hold, 2 * hold)
        samples.sort(key=lambda s: s.emit_time)  # emission order, stable within a release time
        rows, _ = apply_samples(samples, lr)
        return rows

    return run


@dataclass
class StreamingShadow:
    """Streaming pipeline that also keeps the late-record log of its last run."""

    config: PipelineConfig = field(default_factory=PipelineConfig)
    late: list[LateRecord] = field(default_factory=list)

    def __call__(self, records: Sequence[TraceRecord]) -> list[ResultRow]:
        res = run_streaming(records, self.config)
        self.late = res.late
        return res.results


def shadow_run(trace: GeneratedTrace, fraction: float, pipeline_a: Pipeline, pipeline_b: Pipeline) -> tuple[ResultsTable, ResultsTable]:
    """Feed the same keyed slice of ``trace`` to both pipelines."""
    part = shadow_slice(trace, fraction)
    log.info("shadow slice %.4g: %d of %d records", fraction, len(part), len(trace))
    return ResultsTable.from_rows(pipeline_a(part.records)), ResultsTable.from_rows(pipeline_b(part.records))


def ramp(
    trace: GeneratedTrace, pipeline_a: Pipeline, pipeline_b: Pipeline, fractions: Sequence[float] = RAMP
) -> list[tuple[float, ComparisonReport]]:
    """Shadow-compare at each fraction in turn, stopping at the first failing step."""
    out = []
    for f in fractions:
        a, b = shadow_run(trace, f, pipeline_a, pipeline_b)
        report = compare_tables(a, b)
        out.append((f, report))
        log.info("ramp %.4g: match_rate=%.6f schema_ok=%s", f, report.match_rate, report.schema_ok)
        if not report.ok:
            break
    return out


def attribute_mismatches(report: ComparisonReport, trace: GeneratedTrace, late: Iterable[LateRecord]) -> tuple[list[str], list[str]]:
    """Split mismatched sample ids into those whose join key saw a late-dropped record and the rest.

    Only the listed mismatches are examined, so pass a large enough
    ``max_mismatches`` to ``compare_tables`` when every one matters.
    """
    view_of: dict[str, ViewEvent] = {}
    for rec in trace:
        if isinstance(rec.event, ViewEvent):
            view_of.setdefault(derive_sample_id(rec.event.view_id), rec.event)
    dropped = {JoinKey(r.user_id, r.post_id) for r in late if r.action == "dropped"}
    explained, unexplained = [], []
    for m in report.mismatches:
        v = view_of.get(m.sample_id)
        (explained if v is not None and v.key in dropped else unexplained).append(m.sample_id)
    return explained, unexplained
