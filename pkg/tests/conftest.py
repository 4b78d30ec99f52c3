from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured detail."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(rep.nodeid)
            if m is None or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
            lines.append((int(m.group(1)), f"criterion {m.group(1)}: {outcome.upper()} {detail}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
