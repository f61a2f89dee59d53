"""Task execution: repository staging, sandboxed-ish subprocess run with
process-group timeout, stream capture, and provenance."""

from __future__ import annotations

import dataclasses
import os
import platform
import shutil
import signal
import socket
import subprocess
import time
import uuid
from pathlib import Path
from typing import Callable, Optional

from ..protocol import (
    ProvenanceSnapshot,
    RunState,
    SECRET_ENV_PATTERN,
    TaskKind,
    TaskResult,
    TaskSpec,
    filter_captured_env,
    now_ms,
    truncate_stream,
)

# Names the captured stream files claim inside an artifact bundle; task
# outputs with the same names are skipped rather than colliding.
STDOUT_FILE = "stdout.txt"
STDERR_FILE = "stderr.txt"


class StagingError(RuntimeError):
    def __init__(self, message: str, stderr: str = ""):
        self.stderr = stderr
        super().__init__(message)


@dataclasses.dataclass(frozen=True)
class ExecutionOutcome:
    terminal_state: RunState
    result: TaskResult
    files: list[tuple[str, bytes]]


def _git(args: list[str], *, cwd: Optional[Path] = None) -> subprocess.CompletedProcess:
    env = dict(os.environ, GIT_TERMINAL_PROMPT="0")
    return subprocess.run(
        ["git", *args],
        cwd=cwd,
        env=env,
        capture_output=True,
        text=True,
        timeout=120,
    )


def stage_repo(url: str, ref: str, dest_parent: Path) -> tuple[Path, str]:
    """Fresh checkout of exactly `ref`; returns (directory, commit hash).
    A new directory every time, never a reused one."""
    dest_parent.mkdir(parents=True, exist_ok=True)
    dest = dest_parent / f"checkout-{uuid.uuid4().hex[:8]}"
    clone = _git(["clone", "--quiet", url, str(dest)])
    if clone.returncode != 0:
        raise StagingError(f"clone failed for {url}", stderr=clone.stderr)
    checkout = _git(["checkout", "--quiet", "--detach", ref], cwd=dest)
    if checkout.returncode != 0:
        raise StagingError(f"checkout failed for ref {ref}", stderr=checkout.stderr)
    head = _git(["rev-parse", "HEAD"], cwd=dest)
    if head.returncode != 0:
        raise StagingError("rev-parse failed", stderr=head.stderr)
    return dest, head.stdout.strip()


def resolve_tool_versions(tools: tuple[str, ...] = ("git", "pytest")) -> dict[str, str]:
    """Best-effort `<tool> --version` capture; unresolvable tools are
    recorded as "unknown" rather than failing."""
    versions = {}
    for tool in tools:
        version = "unknown"
        if shutil.which(tool):
            try:
                proc = subprocess.run(
                    [tool, "--version"], capture_output=True, text=True, timeout=15
                )
                if proc.returncode == 0 and proc.stdout.strip():
                    version = proc.stdout.strip().splitlines()[0]
            except (OSError, subprocess.SubprocessError):
                pass
        versions[tool] = version
    return versions


def _child_env(spec_env: dict[str, str], artifact_dir: Path) -> dict[str, str]:
    # The inherited environment is stripped of anything secret-looking so
    # the agent's own credentials can never leak into a task; the task's
    # explicit env entries are applied on top, verbatim.
    env = {k: v for k, v in os.environ.items() if not SECRET_ENV_PATTERN.search(k)}
    env.update(spec_env)
    env["CI_ARTIFACT_DIR"] = str(artifact_dir)
    return env


def capture_provenance(
    captured_env: dict[str, str], tool_versions: dict[str, str]
) -> ProvenanceSnapshot:
    return ProvenanceSnapshot(
        hostname=socket.gethostname(),
        os_description=platform.platform(),
        captured_env=filter_captured_env(captured_env),
        tool_versions=tool_versions,
        captured_at=now_ms(),
    )


def _collect_artifact_dir(artifact_dir: Path) -> list[tuple[str, bytes]]:
    files = []
    if artifact_dir.is_dir():
        for path in sorted(artifact_dir.rglob("*")):
            if not path.is_file():
                continue
            rel = path.relative_to(artifact_dir).as_posix()
            if rel in (STDOUT_FILE, STDERR_FILE):
                continue
            files.append((rel, path.read_bytes()))
    return files


def run_task(
    spec: TaskSpec,
    payload: Optional[str],
    workspace: Path,
    tool_versions: dict[str, str],
    *,
    on_running: Optional[Callable[[], None]] = None,
    keep_run_dir: bool = False,
) -> ExecutionOutcome:
    """Execute one claimed task inside a fresh directory under `workspace`.

    Staging failure short-circuits to a failed outcome without running the
    command. Timeout kills the whole process group and reports exit_code -1.
    """
    run_dir = workspace / f"run-{uuid.uuid4().hex[:8]}"
    run_dir.mkdir(parents=True)
    artifact_dir = run_dir / "artifacts"
    artifact_dir.mkdir()
    try:
        tools = dict(tool_versions)
        workdir = run_dir
        if spec.repo is not None:
            try:
                workdir, commit = stage_repo(spec.repo.url, spec.repo.ref, run_dir)
                tools["repo"] = commit
            except (StagingError, subprocess.SubprocessError, OSError) as exc:
                stderr_text = getattr(exc, "stderr", "") or ""
                message = f"staging failed: {exc}"
                result = TaskResult(
                    exit_code=-1,
                    stdout="",
                    stderr=f"{message}\n{stderr_text}".strip(),
                    duration_seconds=0.0,
                    provenance=capture_provenance({}, tools),
                )
                files = [
                    (STDOUT_FILE, b""),
                    (STDERR_FILE, result.stderr.encode("utf-8")),
                ]
                return ExecutionOutcome(RunState.FAILED, result, files)

        if spec.kind is TaskKind.SHELL:
            command = spec.shell_cmd
        else:
            if payload is None:
                raise RuntimeError("function task dispatched without payload")
            command = payload
        assert command is not None

        env = _child_env(spec.env, artifact_dir)
        if on_running is not None:
            on_running()
        started = time.monotonic()
        proc = subprocess.Popen(
            ["/bin/sh", "-c", command, "task", *spec.args],
            cwd=workdir,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, err = proc.communicate(timeout=spec.timeout_seconds)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
            out, err = proc.communicate()
        duration = time.monotonic() - started

        exit_code = -1 if timed_out else proc.returncode
        stdout_text, stdout_truncated = truncate_stream(out)
        stderr_text, stderr_truncated = truncate_stream(err)
        if timed_out:
            note = f"task timed out after {spec.timeout_seconds} seconds; process group terminated"
            stderr_text = f"{stderr_text}\n{note}" if stderr_text else note
            err = err + f"\n{note}".encode("utf-8") if err else note.encode("utf-8")

        result = TaskResult(
            exit_code=exit_code,
            stdout=stdout_text,
            stdout_truncated=stdout_truncated,
            stderr=stderr_text,
            stderr_truncated=stderr_truncated,
            duration_seconds=duration,
            provenance=capture_provenance(env, tools),
        )
        files = [(STDOUT_FILE, out), (STDERR_FILE, err)]
        files.extend(_collect_artifact_dir(artifact_dir))
        terminal = RunState.COMPLETED if exit_code == 0 else RunState.FAILED
        return ExecutionOutcome(terminal, result, files)
    finally:
        if not keep_run_dir:
            shutil.rmtree(run_dir, ignore_errors=True)
