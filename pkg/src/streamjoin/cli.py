"""Command-line entry point.

Exit codes: 0 ok, 2 bad configuration or input, 3 runtime failure,
4 validation mismatch. ``STREAMJOIN_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from streamjoin.codec.frame import size_report
from streamjoin.codec.records import VIEW_SCHEMA
from streamjoin.config import RunConfig, load_config, with_seed
from streamjoin.engine.checkpoint import CheckpointStore, read_checkpoint_file, summarize
from streamjoin.engine.runtime import DeadLetterOverflow
from streamjoin.errors import InputError, InvalidArgument, InvalidConfiguration, StreamJoinError
from streamjoin.pipeline import JOIN_STAGE, SINK_STAGE, PipelineResult, run_streaming, run_windows
from streamjoin.sink import write_results
from streamjoin.validation import StreamingShadow, baseline_pipeline, compare_tables, shadow_run
from streamjoin.workload import GeneratedTrace, generate, read_trace, view_corpus

log = logging.getLogger("streamjoin")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_MISMATCH = 4


def _setup_logging() -> None:
    level = os.environ.get("STREAMJOIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _trace(cfg: RunConfig) -> GeneratedTrace:
    if cfg.trace_path is not None:
        return read_trace(cfg.trace_path)
    return generate(cfg.workload)


def write_metrics(path: Path, metrics: dict[str, int | float | str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(metrics):
            fh.write(f"{k}={metrics[k]}\n")


def pipeline_metrics(res: PipelineResult) -> dict[str, int | float | str]:
    jm, sm = res.join_metrics, res.sink_metrics
    out: dict[str, int | float | str] = {
        "samples_emitted": jm.get("samples_emitted", 0),
        "samples_applied": sm.get("applied", 0),
        "late_dropped": res.late_dropped(),
        "duplicates": jm.get("duplicate_views", 0) + jm.get("duplicate_engagements", 0) + sm.get("duplicate_samples", 0),
        "max_queue_depth": res.engine.max_buffered,
        "queue_capacity_total": res.engine.buffer_capacity,
        "checkpoints": len(res.engine.checkpoints),
        "redelivered": res.engine.redelivered,
        "dead_letters": len(res.engine.dead_letters),
        "restored_from": res.engine.restored_from if res.engine.restored_from is not None else "none",
    }
    for stage, metrics in ((JOIN_STAGE, jm), (SINK_STAGE, sm)):
        for k, v in metrics.items():
            out[f"{stage}.{k}"] = v
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.fault_at is not None:
        if args.fault_at < 1:
            raise InvalidConfiguration("--fault-at must be >= 1")
        cfg = replace(cfg, fault_at=args.fault_at)
    trace = _trace(cfg)
    log.info("mode=%s records=%d fault_at=%s", cfg.mode, len(trace), cfg.fault_at)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "shadow":
        return _shadow(cfg, trace, cfg.fraction, out)
    if cfg.mode == "baseline":
        rows = baseline_pipeline(cfg.pipeline.join, cfg.pipeline.lr)(trace.records)
        write_results(out / "results.csv", rows)
        write_metrics(out / "metrics.txt", {"samples_emitted": len(rows), "samples_applied": len(rows)})
        print(f"baseline: {len(rows)} samples -> {out / 'results.csv'}")
        return EXIT_OK

    store = CheckpointStore(cfg.checkpoint_dir)
    res = run_streaming(trace.records, cfg.pipeline, crash_after=cfg.fault_at, checkpoints=store)
    write_results(out / "results.csv", res.results)
    metrics = pipeline_metrics(res)
    write_metrics(out / "metrics.txt", metrics)
    print(f"streaming: {metrics['samples_applied']} samples applied, {metrics['late_dropped']} late-dropped -> {out / 'results.csv'}")
    return EXIT_OK


def _shadow(cfg: RunConfig, trace: GeneratedTrace, fraction: float, out: Path) -> int:
    streaming = StreamingShadow(cfg.pipeline)
    a, b = shadow_run(trace, fraction, baseline_pipeline(cfg.pipeline.join, cfg.pipeline.lr), streaming)
    write_results(out / "results_baseline.csv", a.rows)
    write_results(out / "results_streaming.csv", b.rows)
    report = compare_tables(a, b)
    lines = [f"fraction={fraction}"] + report.lines()
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK if report.ok else EXIT_MISMATCH


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    fraction = args.fraction if args.fraction is not None else cfg.fraction
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfiguration(f"--fraction must be in (0, 1], got {fraction}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return _shadow(cfg, _trace(cfg), fraction, cfg.output_dir)


def cmd_bench_codec(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    corpus = view_corpus(_trace(cfg))
    rep = size_report(corpus, VIEW_SCHEMA)
    print(f"records={rep.records}")
    print(f"json_bytes={rep.json_bytes}")
    print(f"binary_bytes={rep.frame_uncompressed_bytes}")
    print(f"binary_lz4_bytes={rep.frame_bytes}")
    print(f"reduction_binary={rep.binary_reduction:.4f}")
    print(f"reduction_binary_lz4={rep.reduction:.4f}")
    return EXIT_OK


def parse_delays(text: str) -> list[int]:
    try:
        delays = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidConfiguration(f"bad --delays {text!r}: {exc}") from exc
    if not delays or any(d < 0 for d in delays):
        raise InvalidConfiguration("--delays needs one or more non-negative integers")
    return delays


def sweep_watermark(cfg: RunConfig, trace: GeneratedTrace, delays: Sequence[int], window_ms: int = 60_000) -> list[tuple[int, int, int]]:
    """``(delay, join late-dropped, one-minute window misses)`` per delay; added latency equals the delay."""
    out = []
    for d in delays:
        pc = replace(cfg.pipeline, join=replace(cfg.pipeline.join, watermark_delay_ms=d))
        res = run_streaming(trace.records, pc)
        _, missed = run_windows(trace.records, window_ms, d)
        out.append((d, res.late_dropped(), len(missed)))
    return out


def cmd_sweep_watermark(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    delays = parse_delays(args.delays)
    print("delay_ms,late_dropped,window_missed,added_latency_ms")
    for d, dropped, missed in sweep_watermark(cfg, _trace(cfg), delays):
        print(f"{d},{dropped},{missed},{d}")
    return EXIT_OK


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    s = summarize(read_checkpoint_file(args.path))
    print(f"checkpoint_id={s['checkpoint_id']}")
    print(f"sources={s['sources']}")
    print(f"source_records={s['source_records']}")
    for op in s["operators"]:
        metrics = " ".join(f"{k}={v}" for k, v in sorted(op["metrics"].items()))
        print(f"operator {op['operator']}[{op['lane']}] watermark={op['watermark']} timers={op['timers']} entries={op['entries']} {metrics}".rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamjoin", description="Event-time view/engagement join pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the configured pipeline and write results and metrics")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--fault-at", type=int, help="crash after this many join-stage records, then restore")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench-codec", help="JSON vs binary vs binary+LZ4 sizes of the view corpus")
    b.add_argument("--config", required=True)
    b.set_defaults(func=cmd_bench_codec)

    s = sub.add_parser("sweep-watermark", help="late-dropped count per watermark delay")
    s.add_argument("--config", required=True)
    s.add_argument("--delays", required=True, help="comma-separated delays in ms")
    s.set_defaults(func=cmd_sweep_watermark)

    v = sub.add_parser("validate", help="shadow-compare the baseline and streaming pipelines")
    v.add_argument("--config", required=True)
    v.add_argument("--fraction", type=float)
    v.set_defaults(func=cmd_validate)

    i = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect_checkpoint)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfiguration, InvalidArgument, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeadLetterOverflow as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except StreamJoinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
