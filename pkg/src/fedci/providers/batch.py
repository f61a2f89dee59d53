"""Batch execution provider: pilot jobs riding a scheduler.

Instead of one scheduler submission per task, the provider submits up to
pilot_size pilot jobs; each pilot, once the scheduler reports it running,
contributes a worker that drains the shared task queue. Tasks therefore ride
existing pilots and scheduler submissions stay bounded by pilot_size.

The scheduler is driven purely through configurable shell command templates
(submit/status/cancel), so anything with a CLI works; tests point them at
sim-sched.
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import re
import shlex
import subprocess
import threading
import time
from pathlib import Path
from typing import Callable, Optional

log = logging.getLogger(__name__)

PILOT_STATES = ("pending", "running", "done", "failed")


class BatchSubmitError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class BatchCommands:
    """Shell templates; {script} and {job_id} are the only placeholders."""

    submit: str
    status: str
    cancel: str
    # Regex with one capture group for the job id; default is the last
    # whitespace-delimited token of the submit command's stdout, which
    # matches the common "Submitted batch job <id>" shape.
    job_id_pattern: Optional[str] = None

    def validate(self) -> None:
        if "{script}" not in self.submit:
            raise ValueError("submit template must contain {script}")
        for name, template in (("status", self.status), ("cancel", self.cancel)):
            if "{job_id}" not in template:
                raise ValueError(f"{name} template must contain {{job_id}}")


@dataclasses.dataclass
class PilotJob:
    job_id: str
    state: str
    worker_count: int
    submitted_at: float


class _Pilot:
    def __init__(self, job_id: str, submitted_at: float):
        self.job_id = job_id
        self.state = "pending"
        self.submitted_at = submitted_at
        self.worker: Optional[threading.Thread] = None
        self.monitor: Optional[threading.Thread] = None

    def view(self) -> PilotJob:
        return PilotJob(
            job_id=self.job_id,
            state=self.state,
            worker_count=1 if self.worker else 0,
            submitted_at=self.submitted_at,
        )


class BatchProvider:
    def __init__(
        self,
        commands: BatchCommands,
        *,
        pilot_size: int,
        directives: Optional[dict[str, str]] = None,
        script_dir: Path | str,
        handler: Callable[[object], None],
        poll_interval: float = 0.2,
        idle_ttl: float = 300.0,
    ):
        if pilot_size < 1:
            raise ValueError("pilot_size must be at least 1")
        commands.validate()
        self.commands = commands
        self.pilot_size = pilot_size
        self.directives = dict(directives or {})
        self.script_dir = Path(script_dir)
        self.script_dir.mkdir(parents=True, exist_ok=True)
        self._handler = handler
        self._poll_interval = poll_interval
        self._idle_ttl = idle_ttl
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._pilots: list[_Pilot] = []
        self._outstanding = 0

    # -- public surface ------------------------------------------------------

    def submit(self, item: object) -> None:
        if self._stop.is_set():
            raise RuntimeError("provider is shut down")
        with self._lock:
            self._outstanding += 1
        self._queue.put(item)
        self._ensure_pilots()

    def pilots(self) -> list[PilotJob]:
        with self._lock:
            return [p.view() for p in self._pilots]

    def shutdown(self, *, wait: bool = True) -> None:
        self._stop.set()
        with self._lock:
            pilots = list(self._pilots)
        for pilot in pilots:
            if pilot.state in ("pending", "running"):
                self._run_template(self.commands.cancel, job_id=pilot.job_id)
                pilot.state = "done"
        if wait:
            for pilot in pilots:
                for thread in (pilot.worker, pilot.monitor):
                    if thread is not None:
                        thread.join(timeout=10)

    # -- pilot management --------------------------------------------------------

    def _ensure_pilots(self) -> None:
        with self._lock:
            if self._stop.is_set():
                return
            alive = [p for p in self._pilots if p.state in ("pending", "running")]
            want = min(self.pilot_size, self._outstanding)
            to_launch = max(0, want - len(alive))
        for _ in range(to_launch):
            try:
                self._launch_pilot()
            except BatchSubmitError:
                log.exception("pilot submission failed")
                return

    def _launch_pilot(self) -> None:
        with self._lock:
            ordinal = len(self._pilots) + 1
        script = self.script_dir / f"pilot-{ordinal}.sh"
        script.write_text(self._pilot_script(), "utf-8")
        script.chmod(0o755)
        command = self.commands.submit.format(script=shlex.quote(str(script)))
        proc = subprocess.run(
            command, shell=True, capture_output=True, text=True, timeout=30
        )
        if proc.returncode != 0:
            raise BatchSubmitError(f"submit command failed: {proc.stderr.strip()}")
        job_id = self._parse_job_id(proc.stdout)
        pilot = _Pilot(job_id, time.time())
        pilot.monitor = threading.Thread(
            target=self._monitor, args=(pilot,), name=f"pilot-monitor-{job_id}", daemon=True
        )
        with self._lock:
            self._pilots.append(pilot)
        pilot.monitor.start()

    def _pilot_script(self) -> str:
        lines = ["#!/bin/sh"]
        for key in sorted(self.directives):
            lines.append(f"# directive: {key}={self.directives[key]}")
        # Stand-in body: in this deployment the agent process hosts the
        # worker; the scheduler only accounts for the allocation.
        lines.append("exec sleep 2147483647")
        return "\n".join(lines) + "\n"

    def _parse_job_id(self, stdout: str) -> str:
        if self.commands.job_id_pattern:
            match = re.search(self.commands.job_id_pattern, stdout)
            if not match:
                raise BatchSubmitError(f"job id pattern found nothing in {stdout!r}")
            return match.group(1)
        tokens = stdout.split()
        if not tokens:
            raise BatchSubmitError("submit command printed no job id")
        return tokens[-1]

    def _monitor(self, pilot: _Pilot) -> None:
        failures = 0
        while not self._stop.is_set() and pilot.state == "pending":
            state = self._query_state(pilot)
            if state is None:
                failures += 1
                if failures >= 50:
                    pilot.state = "failed"
                    return
            elif state != pilot.state:
                pilot.state = state
                if state == "running":
                    pilot.worker = threading.Thread(
                        target=self._work,
                        args=(pilot,),
                        name=f"pilot-worker-{pilot.job_id}",
                        daemon=True,
                    )
                    pilot.worker.start()
                    return
                if state in ("done", "failed"):
                    return
            time.sleep(self._poll_interval)

    def _query_state(self, pilot: _Pilot) -> Optional[str]:
        proc = self._run_template(self.commands.status, job_id=pilot.job_id)
        if proc is None or proc.returncode != 0:
            return None
        tokens = proc.stdout.split()
        if tokens and tokens[-1].lower() in PILOT_STATES:
            return tokens[-1].lower()
        return None

    def _run_template(self, template: str, **values: str) -> Optional[subprocess.CompletedProcess]:
        command = template.format(**{k: shlex.quote(v) for k, v in values.items()})
        try:
            return subprocess.run(
                command, shell=True, capture_output=True, text=True, timeout=30
            )
        except (OSError, subprocess.SubprocessError):
            log.exception("batch command failed: %s", command)
            return None

    def _work(self, pilot: _Pilot) -> None:
        idle_since = time.monotonic()
        while not self._stop.is_set():
            try:
                item = self._queue.get(timeout=self._poll_interval)
            except queue.Empty:
                if (
                    time.monotonic() - idle_since > self._idle_ttl
                    and self._queue.qsize() == 0
                ):
                    # Idle pilots hand their allocation back.
                    self._run_template(self.commands.cancel, job_id=pilot.job_id)
                    pilot.state = "done"
                    return
                continue
            try:
                self._handler(item)
            except Exception:
                log.exception("task handler failed")
            finally:
                with self._lock:
                    self._outstanding -= 1
                idle_since = time.monotonic()
