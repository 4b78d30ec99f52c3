"""Run configuration read from an INI-style file.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments. Every section and key is optional and unknown ones are
rejected. Sections and keys:

``[workload]``
    seed, users, posts, views, engagement_rate, duplicate_prob,
    view_rate_per_s, engagement_window_ms, payload,
    lateness (none | uniform | lognormal), lateness_max_ms, lateness_mu,
    lateness_sigma, lateness_cap_ms, spike_start_ms, spike_duration_ms,
    spike_multiplier, trace (path of a trace file to replay instead)
``[topics]``
    partitions, retention_ms
``[join]``
    window_ms, watermark_delay_ms, late_policy
``[engine]``
    parallelism, queue_capacity, checkpoint_interval_ms, checkpoint_dir,
    tick_ms, max_dead_letters, join_rate_per_s, sink_rate_per_s
``[sink]``
    lr, dedup_ttl_ms
``[run]``
    mode (streaming | baseline | shadow), fault_at, output_dir, compress,
    fraction
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from streamjoin.errors import InvalidArgument, InvalidConfiguration
from streamjoin.join import JoinConfig
from streamjoin.pipeline import PipelineConfig
from streamjoin.workload import Lateness, Spike, WorkloadConfig

MODES = ("streaming", "baseline", "shadow")


@dataclass
class RunConfig:
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    mode: str = "streaming"
    fault_at: int | None = None
    output_dir: Path = Path("out")
    trace_path: Path | None = None
    checkpoint_dir: Path | None = None
    fraction: float = 1.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfiguration(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fault_at is not None and self.fault_at < 1:
            raise InvalidConfiguration("fault_at must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise InvalidConfiguration("fraction must be in (0, 1]")
        try:
            self.workload.validate()
        except InvalidArgument as exc:
            raise InvalidConfiguration(str(exc)) from exc
        self.pipeline.validate()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _finite(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {s!r}")
    return v


_KEYS: dict[str, dict[str, Callable[[str], Any]]] = {
    "workload": {
        "seed": int,
        "users": int,
        "posts": int,
        "views": int,
        "engagement_rate": _finite,
        "duplicate_prob": _finite,
        "view_rate_per_s": _finite,
        "engagement_window_ms": int,
        "payload": _bool,
        "lateness": str,
        "lateness_max_ms": int,
        "lateness_mu": _finite,
        "lateness_sigma": _finite,
        "lateness_cap_ms": int,
        "spike_start_ms": int,
        "spike_duration_ms": int,
        "spike_multiplier": _finite,
        "trace": str,
    },
    "topics": {"partitions": int, "retention_ms": int},
    "join": {"window_ms": int, "watermark_delay_ms": int, "late_policy": str},
    "engine": {
        "parallelism": int,
        "queue_capacity": int,
        "checkpoint_interval_ms": int,
        "checkpoint_dir": str,
        "tick_ms": int,
        "max_dead_letters": int,
        "join_rate_per_s": _finite,
        "sink_rate_per_s": _finite,
    },
    "sink": {"lr": _finite, "dedup_ttl_ms": int},
    "run": {"mode": str, "fault_at": int, "output_dir": str, "compress": _bool, "fraction": _finite},
}


def _typed(parser: configparser.ConfigParser) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {s: {} for s in _KEYS}
    for section in parser.sections():
        if section not in _KEYS:
            raise InvalidConfiguration(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            conv = _KEYS[section].get(key)
            if conv is None:
                raise InvalidConfiguration(f"unknown key {key!r} in [{section}]")
            try:
                out[section][key] = conv(raw)
            except ValueError as exc:
                raise InvalidConfiguration(f"[{section}] {key}: {exc}") from exc
    return out


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfiguration(f"cannot parse config: {exc}") from exc
    c = _typed(parser)
    base = base_dir or Path(".")

    w = c["workload"]
    lateness_kind = w.pop("lateness", "lognormal")
    lat_args = {k: w.pop(f"lateness_{k}") for k in ("max_ms", "mu", "sigma", "cap_ms") if f"lateness_{k}" in w}
    lateness = Lateness(lateness_kind, **lat_args)
    spike_keys = ("spike_start_ms", "spike_duration_ms", "spike_multiplier")
    spike = None
    if any(k in w for k in spike_keys):
        if not all(k in w for k in spike_keys):
            raise InvalidConfiguration(f"a spike needs all of {', '.join(spike_keys)}")
        spike = Spike(w.pop("spike_start_ms"), w.pop("spike_duration_ms"), w.pop("spike_multiplier"))
    trace = w.pop("trace", None)
    workload = WorkloadConfig(lateness=lateness, spike=spike, **w)

    j = c["join"]
    join = JoinConfig(
        join_window_ms=j.get("window_ms", JoinConfig.join_window_ms),
        watermark_delay_ms=j.get("watermark_delay_ms", JoinConfig.watermark_delay_ms),
        late_policy=j.get("late_policy", JoinConfig.late_policy),
    )
    e, t, s, r = c["engine"], c["topics"], c["sink"], c["run"]
    checkpoint_dir = e.pop("checkpoint_dir", None)
    pipeline = PipelineConfig(join=join, compress=r.pop("compress", False), **t, **e, **s)

    cfg = RunConfig(
        workload=workload,
        pipeline=pipeline,
        mode=r.get("mode", "streaming"),
        fault_at=r.get("fault_at"),
        output_dir=base / r.get("output_dir", "out"),
        trace_path=base / trace if trace else None,
        checkpoint_dir=base / checkpoint_dir if checkpoint_dir else None,
        fraction=r.get("fraction", 1.0),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidConfiguration(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, p.parent)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, workload=replace(cfg.workload, seed=seed))
