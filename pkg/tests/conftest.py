"""Shared pytest configuration.

Prints a one-line verdict per acceptance criterion in the terminal
summary, so a full run ends with an explicit pass/fail roster for the
end-to-end scenarios regardless of output capturing.
"""

from __future__ import annotations

import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts: dict[int, tuple[str, str]] = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            match = CRITERION.search(getattr(report, "nodeid", ""))
            if not match:
                continue
            number = int(match.group(1))
            name = match.group(2).replace("_", " ")
            status = "PASS" if outcome == "passed" else "FAIL"
            # Any non-pass phase (setup error, call failure, skip) loses.
            if verdicts.get(number, (None, "PASS"))[1] == "FAIL":
                continue
            if outcome == "passed" and getattr(report, "when", "call") != "call":
                continue
            verdicts[number] = (name, status)
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(verdicts):
        name, status = verdicts[number]
        terminalreporter.write_line(f"criterion {number} ({name}): {status}")
