"""The work behind the `ci-run` command: submit a task (or a labelled
matrix of identical tasks), wait for terminal states, relay output,
publish artifacts, and reduce everything to a process exit code.

Exit codes: 0 all runs completed; 1 at least one run failed, was rejected,
expired, or missed the local deadline; 2 authentication failure; 3 broker
unreachable. Every non-zero exit writes one machine-parseable
"ci-run: reason=<word> ..." line to stderr.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, TextIO

from .client import ApiError, BrokerUnreachable, UserClient
from .durations import parse_test_durations

TERMINAL_STATES = ("completed", "failed", "rejected", "expired")
POLL_INTERVAL_SECONDS = 1.0
POLL_JITTER_SECONDS = 0.25
# Consecutive poll failures tolerated before the broker counts as gone.
POLL_FAILURE_BUDGET = 10

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_AUTH = 2
EXIT_UNREACHABLE = 3


class DigestMismatch(RuntimeError):
    def __init__(self, paths: list[str]):
        self.paths = paths
        super().__init__(f"artifact content does not match recorded digests: {', '.join(paths)}")


@dataclasses.dataclass(frozen=True)
class StepInputs:
    """Everything one CI step needs to dispatch work through the broker."""

    sites: dict[str, str]  # label -> endpoint_id; single steps use one entry
    shell_cmd: Optional[str] = None
    function_id: Optional[str] = None
    args: tuple[str, ...] = ()
    repo_url: Optional[str] = None
    repo_ref: Optional[str] = None
    timeout_seconds: int = 600
    artifact_dir: Optional[Path] = None
    fan_out: int = 3
    deadline_slack_seconds: float = 120.0
    poll_interval_seconds: float = POLL_INTERVAL_SECONDS

    def __post_init__(self):
        if not self.sites:
            raise ValueError("at least one endpoint required")
        if (self.shell_cmd is None) == (self.function_id is None):
            raise ValueError("exactly one of shell_cmd / function_id required")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")


@dataclasses.dataclass
class SiteOutcome:
    label: str
    run_id: Optional[str] = None
    state: Optional[str] = None
    exit_code: Optional[int] = None
    duration_seconds: Optional[float] = None
    tests: list[tuple[str, float]] = dataclasses.field(default_factory=list)
    stdout: str = ""
    stderr: str = ""
    reason: Optional[str] = None  # set iff the site did not complete

    @property
    def ok(self) -> bool:
        return self.state == "completed"

    def report_row(self) -> dict:
        return {
            "label": self.label,
            "run_id": self.run_id,
            "state": self.state,
            "exit_code": self.exit_code,
            "duration_seconds": self.duration_seconds,
            "tests": [{"name": name, "seconds": seconds} for name, seconds in self.tests],
        }


def _task_fields(inputs: StepInputs, endpoint_id: str) -> dict:
    fields: dict = {
        "endpoint_id": endpoint_id,
        "kind": "shell" if inputs.shell_cmd is not None else "function",
        "timeout_seconds": inputs.timeout_seconds,
        "args": list(inputs.args),
    }
    if inputs.shell_cmd is not None:
        fields["shell_cmd"] = inputs.shell_cmd
    else:
        fields["function_id"] = inputs.function_id
    if inputs.repo_url:
        fields["repo"] = {"url": inputs.repo_url, "ref": inputs.repo_ref or "HEAD"}
    return fields


def publish_artifacts(client: UserClient, run_id: str, dest_dir: Path) -> Path:
    """Download the run's artifact bundle into dest_dir/files and write a
    manifest next to it. Content is verified against the digests recorded
    at upload time; a purged bundle yields a manifest-only result."""
    dest_dir.mkdir(parents=True, exist_ok=True)
    bundles = client.run_artifacts(run_id)
    manifest_path = dest_dir / "manifest.json"
    if not bundles:
        manifest_path.write_text(json.dumps({"run_id": run_id, "files": []}, indent=2))
        return manifest_path
    bundle_meta = bundles[-1]
    bundle, contents = client.get_artifact(bundle_meta["artifact_id"])
    manifest = {
        "artifact_id": bundle["artifact_id"],
        "run_id": run_id,
        "purged": bundle["purged"],
        "files": bundle["files"],
    }
    mismatched = []
    if contents is not None:
        files_dir = dest_dir / "files"
        expected = {f["relative_path"]: f["digest"] for f in bundle["files"]}
        for rel, data in contents.items():
            target = files_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
            digest = hashlib.sha256(data).hexdigest()
            if expected.get(rel) != digest:
                mismatched.append(rel)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if mismatched:
        raise DigestMismatch(sorted(mismatched))
    return manifest_path


def _await_terminal(
    client: UserClient, run_id: str, inputs: StepInputs, sleep: Callable[[float], None]
) -> dict:
    """Poll until the run reaches a terminal state or the local deadline
    passes; returns the last observed run document."""
    deadline = time.monotonic() + inputs.timeout_seconds + inputs.deadline_slack_seconds
    run = client.get_run(run_id)
    failures = 0
    while run["state"] not in TERMINAL_STATES:
        if time.monotonic() >= deadline:
            return run
        sleep(inputs.poll_interval_seconds + random.uniform(0, POLL_JITTER_SECONDS))
        try:
            run = client.get_run(run_id)
            failures = 0
        except BrokerUnreachable:
            failures += 1
            if failures >= POLL_FAILURE_BUDGET:
                raise
    return run


def _execute_site(
    label: str,
    endpoint_id: str,
    inputs: StepInputs,
    client: UserClient,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> SiteOutcome:
    outcome = SiteOutcome(label=label)
    try:
        run = client.submit_task(**_task_fields(inputs, endpoint_id))
    except BrokerUnreachable as exc:
        outcome.reason = "broker_unreachable"
        outcome.stderr = str(exc)
        return outcome
    except ApiError as exc:
        outcome.reason = exc.code
        outcome.stderr = str(exc)
        return outcome
    outcome.run_id = run["run_id"]
    try:
        run = _await_terminal(client, outcome.run_id, inputs, sleep)
    except BrokerUnreachable as exc:
        outcome.reason = "broker_unreachable"
        outcome.stderr = str(exc)
        return outcome
    outcome.state = run["state"]

    if outcome.state in ("completed", "failed"):
        result = run["result"]
        outcome.exit_code = result["exit_code"]
        outcome.duration_seconds = result["duration_seconds"]
        outcome.stdout = result["stdout"]
        outcome.stderr = result["stderr"]
        outcome.tests = parse_test_durations(result["stdout"])
        if outcome.state == "failed":
            outcome.reason = "run_failed"
    elif outcome.state in ("rejected", "expired"):
        outcome.reason = outcome.state
    else:
        # Still non-terminal at the local deadline.
        outcome.reason = (
            "approval_timeout" if outcome.state == "pending_approval" else "deadline_exceeded"
        )

    if inputs.artifact_dir is not None and outcome.run_id is not None:
        site_dir = inputs.artifact_dir if len(inputs.sites) == 1 else inputs.artifact_dir / label
        try:
            publish_artifacts(client, outcome.run_id, site_dir)
        except DigestMismatch as exc:
            outcome.reason = "digest_mismatch"
            outcome.stderr += f"\n{exc}"
        except (BrokerUnreachable, ApiError) as exc:
            # Artifact download is best-effort once the outcome is known.
            outcome.stderr += f"\nartifact download failed: {exc}"
    return outcome


def _write_report(inputs: StepInputs, outcomes: list[SiteOutcome]) -> None:
    if inputs.artifact_dir is None:
        return
    inputs.artifact_dir.mkdir(parents=True, exist_ok=True)
    report = {"sites": [o.report_row() for o in outcomes]}
    (inputs.artifact_dir / "report.json").write_text(json.dumps(report, indent=2))


def _reason_line(outcome: SiteOutcome) -> str:
    parts = [f"reason={outcome.reason}"]
    if outcome.run_id:
        parts.append(f"run_id={outcome.run_id}")
    if outcome.state:
        parts.append(f"state={outcome.state}")
    if outcome.label != "default":
        parts.append(f"site={outcome.label}")
    return "ci-run: " + " ".join(parts)


def run_step(
    inputs: StepInputs,
    client: UserClient,
    *,
    out: TextIO,
    err: TextIO,
    sleep: Callable[[float], None] = time.sleep,
) -> int:
    """Single-endpoint execution: the remote task's stdout and stderr are
    relayed verbatim and the exit code mirrors the remote outcome."""
    (label, endpoint_id), = inputs.sites.items()
    outcome = _execute_site(label, endpoint_id, inputs, client, sleep=sleep)
    _write_report(inputs, [outcome])
    out.write(outcome.stdout)
    out.flush()
    if outcome.stderr:
        err.write(outcome.stderr if outcome.stderr.endswith("\n") else outcome.stderr + "\n")
    if outcome.ok:
        return EXIT_OK
    err.write(_reason_line(outcome) + "\n")
    err.flush()
    if outcome.reason == "broker_unreachable":
        return EXIT_UNREACHABLE
    return EXIT_RUN_FAILED


def run_matrix(
    inputs: StepInputs,
    client_factory: Callable[[], UserClient],
    *,
    out: TextIO,
    err: TextIO,
    sleep: Callable[[float], None] = time.sleep,
) -> int:
    """Run the same step on every site concurrently; failures on one site
    never stop the others. Prints a per-site table and writes report.json."""
    labels = list(inputs.sites)
    with ThreadPoolExecutor(max_workers=min(inputs.fan_out, len(labels))) as pool:
        futures = {
            label: pool.submit(
                _execute_site, label, inputs.sites[label], inputs, client_factory(), sleep=sleep
            )
            for label in labels
        }
        outcomes = [futures[label].result() for label in labels]

    _write_report(inputs, outcomes)
    width = max(len(o.label) for o in outcomes)
    out.write(f"{'SITE':<{width}}  {'STATE':<16} {'EXIT':>4}  {'SECONDS':>8}  TESTS\n")
    for o in outcomes:
        exit_text = "-" if o.exit_code is None else str(o.exit_code)
        duration = "-" if o.duration_seconds is None else f"{o.duration_seconds:.2f}"
        state = o.state or f"({o.reason})"
        out.write(f"{o.label:<{width}}  {state:<16} {exit_text:>4}  {duration:>8}  {len(o.tests)}\n")
    out.flush()
    if all(o.ok for o in outcomes):
        return EXIT_OK
    for o in outcomes:
        if not o.ok:
            err.write(_reason_line(o) + "\n")
    err.flush()
    return EXIT_RUN_FAILED
