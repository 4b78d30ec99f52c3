"""Acceptance criteria, one test each, at their stated tolerances.

The summary printed at the end of the run has one pass/fail line per criterion.
"""

from __future__ import annotations

import random
import time
from collections import Counter

import lz4.block

from streamjoin.codec.frame import size_report
from streamjoin.codec.lz4 import lz4_compress, lz4_decompress
from streamjoin.codec.records import VIEW_SCHEMA
from streamjoin.errors import DecodeError
from streamjoin.join import JoinConfig
from streamjoin.model import SignalKind, ViewEvent, make_sample
from streamjoin.pipeline import PipelineConfig, run_streaming
from streamjoin.sink import contention_detector, simulate_pods
from streamjoin.validation import StreamingShadow, attribute_mismatches, baseline_pipeline, compare_tables, ramp, shadow_run
from streamjoin.workload import STANDARD_CORPUS, Lateness, Spike, WorkloadConfig, generate, oracle_join, view_corpus

W = 300_000
# measured on STANDARD_CORPUS; a regression baseline, not a target
PINNED_REDUCTION = 0.7198


def _sample_key(s):
    return (s.sample_id, s.labels.bits(), s.view, s.emit_time)


def test_criterion_1_oracle_equivalence(record_property):
    tr = generate(WorkloadConfig(seed=1, views=100_000, engagement_rate=0.2, lateness=Lateness.lognormal(cap_ms=14_000)))
    config = PipelineConfig(join=JoinConfig(watermark_delay_ms=15_000), tick_ms=100)
    t0 = time.perf_counter()
    res = run_streaming(tr.records, config)
    elapsed = time.perf_counter() - t0
    got, want = Counter(map(_sample_key, res.samples)), Counter(map(_sample_key, oracle_join(tr, W)))
    diffs = sum(((got - want) + (want - got)).values())
    record_property("detail", f"samples={sum(got.values())} diffs={diffs} runtime={elapsed:.1f}s (limit 60s)")
    assert diffs == 0
    assert elapsed < 60.0


def test_criterion_2_out_of_order_recovery(record_property):
    tr = generate(WorkloadConfig(seed=2, views=20_000, engagement_rate=0.2, lateness=Lateness.lognormal()))
    lateness = {}
    for r in tr:
        ev = r.event
        lateness[ev.view_id if isinstance(ev, ViewEvent) else ev.engagement_id] = r.arrival_time - ev.event_time
    dropped = []
    unrecovered_at_15s = None
    for d in (0, 5_000, 15_000, 60_000):
        res = run_streaming(tr.records, PipelineConfig(join=JoinConfig(watermark_delay_ms=d), tick_ms=50))
        dropped.append(res.late_dropped())
        if d == 15_000:
            unrecovered_at_15s = sum(1 for r in res.late if r.action == "dropped" and lateness[r.record_id] <= 15_000)
    within = sum(1 for v in lateness.values() if v <= 15_000)
    record_property("detail", f"late_dropped at 0/5/15/60s={dropped} lateness<=15s events={within} dropped at 15s={unrecovered_at_15s}")
    assert all(a >= b for a, b in zip(dropped, dropped[1:]))
    assert dropped[0] > 0
    assert unrecovered_at_15s == 0


def test_criterion_3_exactly_once_effect(record_property):
    config = PipelineConfig(checkpoint_interval_ms=10_000, tick_ms=100)
    redelivered = []
    identical = 0
    for seed in range(20):
        tr = generate(WorkloadConfig(seed=100 + seed, views=10_000, engagement_rate=0.2, duplicate_prob=0.02))
        crash_at = random.Random(seed).randint(1, len(tr) - 1)
        clean = run_streaming(tr.records, config)
        failed = run_streaming(tr.records, config, crash_after=crash_at)
        same_emb = {u: e.to_bytes() for u, e in clean.embeddings.items()} == {u: e.to_bytes() for u, e in failed.embeddings.items()}
        same_set = {r.sample_id for r in clean.results} == {r.sample_id for r in failed.results}
        identical += same_emb and same_set
        redelivered.append(failed.engine.redelivered)
    exercised = sum(1 for n in redelivered if n > 0)
    record_property("detail", f"identical={identical}/20 runs with redelivery={exercised}/20 (need 15)")
    assert identical == 20
    assert exercised >= 15


def test_criterion_4_affinity_vs_contention(record_property):
    rng = random.Random(4)
    samples = []
    for i in range(100_000):
        user = f"u{min(int(rng.paretovariate(1.1)), 200)}"
        view = ViewEvent(f"v{i}", user, f"p{rng.randrange(1000)}", i)
        samples.append(make_sample(view, {SignalKind.LIKE} if rng.random() < 0.3 else set(), i))
    sticky = contention_detector(simulate_pods(samples, consumers=2, mode="affinity").updates)
    moved_run = simulate_pods(samples, consumers=2, mode="reassign")
    moved = contention_detector(moved_run.updates)
    record_property("detail", f"violations affinity={sticky} reassign={moved} over {len(samples)} updates")
    assert sticky == 0
    assert moved >= 1


def test_criterion_5_compression(record_property):
    rep = size_report(view_corpus(generate(STANDARD_CORPUS)), VIEW_SCHEMA)
    record_property("detail", f"reduction={rep.reduction:.4f} (>= 0.70, pinned {PINNED_REDUCTION} +-0.02; json={rep.json_bytes} framed={rep.frame_bytes})")
    assert rep.reduction >= 0.70
    assert abs(rep.reduction - PINNED_REDUCTION) <= 0.02


def _interop_input(rng: random.Random, i: int) -> bytes:
    n = rng.randrange(0, 4096)
    kind = i % 3
    if kind == 0:
        return rng.randbytes(n)
    if kind == 1:
        unit = rng.randbytes(rng.randrange(1, 16))
        return (unit * (n // len(unit) + 1))[:n]
    parts = []
    while sum(map(len, parts)) < n:
        parts.append(rng.randbytes(rng.randrange(1, 64)) if rng.random() < 0.5 else bytes([rng.randrange(4)]) * rng.randrange(1, 200))
    return b"".join(parts)[:n]


def test_criterion_6_lz4_interop(record_property):
    rng = random.Random(6)
    interop_fail = 0
    for i in range(1000):
        data = _interop_input(rng, i)
        ours = lz4_compress(data)
        theirs = lz4.block.compress(data, store_size=False)
        interop_fail += lz4.block.decompress(ours, uncompressed_size=len(data)) != data if data else ours != b"\x00"
        interop_fail += lz4_decompress(theirs, len(data)) != data
    crashes = mismatches = 0
    for _ in range(100_000):
        data = rng.randbytes(rng.randrange(0, 200)) if rng.random() < 0.5 else bytes(rng.choice(b"ab") for _ in range(rng.randrange(0, 200)))
        try:
            mismatches += lz4_decompress(lz4_compress(data), len(data)) != data
        except Exception:
            crashes += 1
    garbage_crashes = 0
    for _ in range(10_000):
        blob = rng.randbytes(rng.randrange(0, 64))
        try:
            lz4_decompress(blob, rng.randrange(0, 256))
        except DecodeError:
            pass
        except Exception:
            garbage_crashes += 1
    record_property("detail", f"interop failures={interop_fail}/2000 round-trip mismatches={mismatches} crashes={crashes + garbage_crashes}")
    assert interop_fail == 0
    assert mismatches == 0 and crashes == 0 and garbage_crashes == 0


def test_criterion_7_backpressure(record_property):
    tr = generate(WorkloadConfig(seed=7, views=5000, engagement_rate=0.2, spike=Spike(20_000, 10_000, 10.0), lateness=Lateness.uniform(2000)))
    config = PipelineConfig(tick_ms=10, queue_capacity=64, sink_pauses=[(22_000, 27_000)], sink_rate_per_s=400.0)
    res = run_streaming(tr.records, config)
    cons = res.conservation
    balanced = all(c["total"] == c["processed"] and c["unread"] == 0 and c["queued"] == 0 for c in cons.values())
    distinct = len({v.view_id for v in tr.views()})
    record_property(
        "detail",
        f"max_buffered={res.engine.max_buffered} capacity={res.engine.buffer_capacity} "
        f"join in={cons['join']['processed']}/{cons['join']['total']} applied={len(res.results)}/{distinct} dead_letters={len(res.engine.dead_letters)}",
    )
    assert res.engine.max_buffered <= res.engine.buffer_capacity
    assert res.engine.max_buffered >= 4 * config.queue_capacity  # the sink queues did fill
    assert balanced
    assert len(res.results) == distinct and not res.engine.dead_letters
    assert cons["join"]["total"] == len(tr)


def test_criterion_8_shadow_validation(record_property):
    pc = PipelineConfig(tick_ms=50)
    bounded = generate(WorkloadConfig(seed=8, views=20_000, users=2000, engagement_rate=0.2, lateness=Lateness.lognormal(cap_ms=14_000)))
    steps = ramp(bounded, baseline_pipeline(pc.join), StreamingShadow(pc))
    rates = [(f, r.match_rate, r.schema_ok) for f, r in steps]

    unbounded = generate(WorkloadConfig(seed=8, views=20_000, users=2000, engagement_rate=0.2, lateness=Lateness.lognormal(cap_ms=120_000)))
    streaming = StreamingShadow(pc)
    a, b = shadow_run(unbounded, 1.0, baseline_pipeline(pc.join), streaming)
    report = compare_tables(a, b, max_mismatches=10**9)
    explained, unexplained = attribute_mismatches(report, unbounded, streaming.late)
    record_property(
        "detail",
        f"ramp={[(f, round(m, 6)) for f, m, _ in rates]} unbounded match_rate={report.match_rate:.4f} "
        f"mismatches={report.mismatch_total} explained={len(explained)} unexplained={len(unexplained)}",
    )
    assert [f for f, _, _ in rates] == [0.001, 0.01, 0.1, 1.0]
    assert all(m == 1.0 and ok for _, m, ok in rates)
    assert report.match_rate < 1.0 and report.schema_ok
    assert explained and not unexplained


def test_criterion_9_cost_results_not_claimed(record_property):
    # fleet cost savings need production infrastructure; nothing here measures them
    record_property("detail", "N/A: cost savings are not reproducible at desk scale and are not claimed")
