from __future__ import annotations

import os
import subprocess
import sys

import pytest

from streamjoin.cli import main, parse_delays
from streamjoin.errors import InvalidConfiguration
from streamjoin.validation import read_results
from streamjoin.workload import late_window_trace, write_trace

SMALL = """
[workload]
seed = 5
views = 100
users = 20
engagement_rate = 0.2
lateness = uniform
lateness_max_ms = 3000

[engine]
tick_ms = 10

[run]
output_dir = out
"""


def write_config(tmp_path, text=SMALL, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_minimal(tmp_path, capsys):
    assert main(["run", "--config", write_config(tmp_path)]) == 0
    rows = read_results(tmp_path / "out" / "results.csv").rows
    assert len(rows) == 100 and len({r.sample_id for r in rows}) == 100
    metrics = dict(line.split("=", 1) for line in (tmp_path / "out" / "metrics.txt").read_text().splitlines())
    assert metrics["samples_emitted"] == "100" and metrics["samples_applied"] == "100"
    assert metrics["late_dropped"] == "0"
    assert "100 samples applied" in capsys.readouterr().out


def test_metrics_are_byte_identical_across_runs(tmp_path):
    cfg = write_config(tmp_path)
    main(["run", "--config", cfg])
    first = (tmp_path / "out" / "metrics.txt").read_bytes()
    main(["run", "--config", cfg])
    assert (tmp_path / "out" / "metrics.txt").read_bytes() == first


def test_seed_flag_changes_the_workload(tmp_path):
    cfg = write_config(tmp_path)
    main(["run", "--config", cfg])
    a = (tmp_path / "out" / "results.csv").read_text()
    main(["run", "--config", cfg, "--seed", "6"])
    assert (tmp_path / "out" / "results.csv").read_text() != a


def test_fault_run_equals_clean_run(tmp_path):
    text = SMALL.replace("views = 100", "views = 1000").replace("tick_ms = 10", "tick_ms = 10\ncheckpoint_interval_ms = 2000")
    cfg = write_config(tmp_path, text)
    assert main(["run", "--config", cfg]) == 0
    clean = read_results(tmp_path / "out" / "results.csv").rows
    assert main(["run", "--config", cfg, "--fault-at", "900"]) == 0
    faulty = read_results(tmp_path / "out" / "results.csv").rows
    assert sorted(faulty) == sorted(clean)
    metrics = (tmp_path / "out" / "metrics.txt").read_text()
    assert "restored_from=none" not in metrics


@pytest.mark.parametrize(
    "text",
    [
        "[bogus]\nx = 1\n",
        "[workload]\ncolour = red\n",
        "[workload]\nviews = ten\n",
        "[workload]\nengagement_rate = 2\n",
        "[run]\nmode = turbo\n",
        "[join]\nlate_policy = keep\n",
        "no section header\n",
    ],
)
def test_bad_config_exits_2(tmp_path, text, capsys):
    assert main(["run", "--config", write_config(tmp_path, text)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 2
    assert main(["run", "--config", write_config(tmp_path), "--fault-at", "0"]) == 2


def test_shadow_mode(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL.replace("[run]", "[run]\nmode = shadow\nfraction = 1.0"))
    assert main(["run", "--config", cfg]) == 0
    out = tmp_path / "out"
    assert read_results(out / "results_baseline.csv").rows
    assert read_results(out / "results_streaming.csv").rows
    report = (out / "report.txt").read_text().splitlines()
    assert report[:3] == ["fraction=1.0", "match_rate=1.000000", "schema_ok=true"]


def test_shadow_mismatch_exits_4(tmp_path):
    text = SMALL.replace("views = 100", "views = 2000").replace("lateness = uniform", "lateness = lognormal").replace("lateness_max_ms = 3000", "lateness_cap_ms = 120000")
    text = text.replace("engagement_rate = 0.2", "engagement_rate = 0.3")
    assert main(["validate", "--config", write_config(tmp_path, text), "--fraction", "1.0"]) == 4


def test_validate_fraction_errors(tmp_path):
    assert main(["validate", "--config", write_config(tmp_path), "--fraction", "0"]) == 2
    assert main(["validate", "--config", write_config(tmp_path), "--fraction", "0.5"]) == 0


def test_baseline_mode(tmp_path):
    cfg = write_config(tmp_path, SMALL.replace("[run]", "[run]\nmode = baseline"))
    assert main(["run", "--config", cfg]) == 0
    assert len(read_results(tmp_path / "out" / "results.csv").rows) == 100


def test_bench_codec(tmp_path, capsys):
    assert main(["bench-codec", "--config", write_config(tmp_path)]) == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.splitlines())
    assert out["records"] == "100"
    assert int(out["binary_lz4_bytes"]) < int(out["json_bytes"])
    assert 0.0 < float(out["reduction_binary_lz4"]) < 1.0


def test_bench_codec_empty_corpus_exits_2(tmp_path):
    (tmp_path / "t.trace").write_bytes(b"")
    assert main(["bench-codec", "--config", write_config(tmp_path, "[workload]\ntrace = t.trace\n")]) == 2


def test_sweep_on_late_window_trace(tmp_path, capsys):
    write_trace(tmp_path / "f.trace", late_window_trace())
    cfg = write_config(tmp_path, "[workload]\ntrace = f.trace\n")
    assert main(["sweep-watermark", "--config", cfg, "--delays", "0,5000,15000"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["delay_ms,late_dropped,window_missed,added_latency_ms", "0,0,2,0", "5000,0,1,5000", "15000,0,0,15000"]


def test_sweep_in_order_trace(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL.replace("lateness = uniform", "lateness = none"))
    assert main(["sweep-watermark", "--config", cfg, "--delays", "0"]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("0,0,")


def test_parse_delays():
    assert parse_delays("0, 5000,15000") == [0, 5000, 15000]
    for bad in ("", "a", "-1"):
        with pytest.raises(InvalidConfiguration):
            parse_delays(bad)


def test_inspect_checkpoint(tmp_path, capsys):
    text = SMALL.replace("tick_ms = 10", "tick_ms = 10\ncheckpoint_dir = ckpt\ncheckpoint_interval_ms = 500")
    assert main(["run", "--config", write_config(tmp_path, text)]) == 0
    files = sorted(p for p in (tmp_path / "ckpt").iterdir() if p.name != "MANIFEST")
    assert files
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(files[-1])]) == 0
    out = capsys.readouterr().out
    assert out.startswith("checkpoint_id=")
    assert "operator join[0]" in out and "operator sink[0]" in out
    (tmp_path / "broken").write_bytes(files[-1].read_bytes()[:20])
    assert main(["inspect-checkpoint", str(tmp_path / "broken")]) == 3


def test_console_script_and_log_env(tmp_path):
    env = dict(os.environ, STREAMJOIN_LOG="info")
    proc = subprocess.run([sys.executable, "-m", "streamjoin.cli", "run", "--config", write_config(tmp_path)], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "INFO" in proc.stderr
