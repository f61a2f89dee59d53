"""Extraction of per-test durations from test-runner output.

Understands the duration report pytest prints with --durations: lines of
the form "0.42s call test_dock_smiles". Only the call phase counts as the
test's runtime; setup and teardown rows are ignored. Anything that does
not look like a duration row is skipped, so feeding arbitrary build output
through the parser is safe.
"""

from __future__ import annotations

import re

DURATION_ROW = re.compile(r"^\s*(\d+(?:\.\d+)?)s\s+(call|setup|teardown)\s+(\S+)\s*$")


def parse_test_durations(stdout_text: str) -> list[tuple[str, float]]:
    """Returns (test name, seconds) pairs sorted by test name; empty when
    the output contains no recognizable duration report."""
    rows = []
    for line in stdout_text.splitlines():
        match = DURATION_ROW.match(line)
        if match and match.group(2) == "call":
            rows.append((match.group(3), float(match.group(1))))
    rows.sort(key=lambda row: row[0])
    return rows
