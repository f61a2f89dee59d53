"""Simulated batch scheduler.

Behaves like a tiny single-partition scheduler: submitted scripts wait
queue_delay_seconds, then start FIFO as concurrency slots free up. Job state
is a pure function of (config, submissions, cancellations, now), so the same
event history always yields the same trace, whether time is virtual (tests)
or the wall clock (CLI mode shared between processes via a lock file).

Cancellation semantics: a job cancelled at or before its start time fails
and never runs; cancelling a running job ends it as done.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path
from typing import Optional

from filelock import FileLock

STATES = ("pending", "running", "done", "failed")


class UnknownJobError(KeyError):
    pass


@dataclasses.dataclass(frozen=True)
class JobPlan:
    job_id: str
    script: str
    submitted_at: float
    start: Optional[float]  # None: cancelled while pending
    end: float  # inf for jobs that run until cancelled

    def state_at(self, now: float) -> str:
        if self.start is None:
            return "failed"
        if now < self.start:
            return "pending"
        if now < self.end:
            return "running"
        return "done"


class SimScheduler:
    def __init__(
        self,
        *,
        queue_delay_seconds: float = 0.0,
        max_concurrent_jobs: int = 1,
        job_runtime_seconds: Optional[float] = None,
        start_time: float = 0.0,
    ):
        if max_concurrent_jobs < 1:
            raise ValueError("max_concurrent_jobs must be at least 1")
        self.queue_delay_seconds = queue_delay_seconds
        self.max_concurrent_jobs = max_concurrent_jobs
        self.job_runtime_seconds = job_runtime_seconds
        self._now = start_time
        self._submissions: list[tuple[float, str]] = []
        self._cancels: dict[str, float] = {}

    # -- time ---------------------------------------------------------------

    @property
    def now(self) -> float:
        return self._now

    def tick(self, now: float) -> None:
        """Advance simulated time; the only way time moves."""
        if now < self._now:
            raise ValueError(f"time cannot move backwards ({now} < {self._now})")
        self._now = now

    # -- events -------------------------------------------------------------

    def submit(self, script: str) -> str:
        self._submissions.append((self._now, script))
        return f"sim-{len(self._submissions)}"

    def cancel(self, job_id: str) -> None:
        self._require(job_id)
        # First cancellation wins; repeats are no-ops.
        self._cancels.setdefault(job_id, self._now)

    def status(self, job_id: str) -> str:
        self._require(job_id)
        return self._plan()[job_id].state_at(self._now)

    @property
    def submission_log(self) -> list[tuple[float, str]]:
        return list(self._submissions)

    def _require(self, job_id: str) -> None:
        if not job_id.startswith("sim-"):
            raise UnknownJobError(job_id)
        try:
            ordinal = int(job_id[4:])
        except ValueError as exc:
            raise UnknownJobError(job_id) from exc
        if not 1 <= ordinal <= len(self._submissions):
            raise UnknownJobError(job_id)

    # -- the schedule ---------------------------------------------------------

    def _plan(self) -> dict[str, JobPlan]:
        """Greedy FIFO assignment over concurrency slots. Later submissions
        never affect earlier ones, so a single forward pass is exact."""
        slots = [0.0] * self.max_concurrent_jobs
        plans = {}
        for ordinal, (submitted_at, script) in enumerate(self._submissions, start=1):
            job_id = f"sim-{ordinal}"
            eligible = submitted_at + self.queue_delay_seconds
            slot_index = min(range(len(slots)), key=slots.__getitem__)
            start = max(eligible, slots[slot_index])
            cancel_at = self._cancels.get(job_id)
            if cancel_at is not None and cancel_at <= start:
                plans[job_id] = JobPlan(job_id, script, submitted_at, None, cancel_at)
                continue
            end = math.inf
            if self.job_runtime_seconds is not None:
                end = start + self.job_runtime_seconds
            if cancel_at is not None:
                end = min(end, cancel_at)
            slots[slot_index] = end
            plans[job_id] = JobPlan(job_id, script, submitted_at, start, end)
        return plans

    def trace(self) -> list[tuple[str, Optional[float], float]]:
        """(job_id, start, end) for every submission; determinism oracle."""
        return [(p.job_id, p.start, p.end) for p in self._plan().values()]


class FileSimScheduler:
    """The same scheduler with its event history on disk, so independent
    CLI invocations (and the processes a batch provider spawns) share one
    coherent queue. Wall clock is the time source."""

    CONFIG = "config.json"
    EVENTS = "events.jsonl"
    LOCK = "lock"

    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir)
        if not (self.state_dir / self.CONFIG).exists():
            raise FileNotFoundError(f"scheduler state not initialized: {self.state_dir}")
        self._lock = FileLock(str(self.state_dir / self.LOCK))

    @classmethod
    def init(
        cls,
        state_dir: Path | str,
        *,
        queue_delay_seconds: float = 0.0,
        max_concurrent_jobs: int = 1,
        job_runtime_seconds: Optional[float] = None,
    ) -> "FileSimScheduler":
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        config = {
            "queue_delay_seconds": queue_delay_seconds,
            "max_concurrent_jobs": max_concurrent_jobs,
            "job_runtime_seconds": job_runtime_seconds,
        }
        (state_dir / cls.CONFIG).write_text(json.dumps(config), "utf-8")
        (state_dir / cls.EVENTS).touch()
        return cls(state_dir)

    def _load(self) -> SimScheduler:
        config = json.loads((self.state_dir / self.CONFIG).read_text("utf-8"))
        sched = SimScheduler(
            queue_delay_seconds=config["queue_delay_seconds"],
            max_concurrent_jobs=config["max_concurrent_jobs"],
            job_runtime_seconds=config["job_runtime_seconds"],
        )
        for line in (self.state_dir / self.EVENTS).read_text("utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            sched.tick(event["at"])
            if event["kind"] == "submit":
                sched.submit(event["script"])
            else:
                sched.cancel(event["job_id"])
        sched.tick(max(sched.now, time.time()))
        return sched

    def _append(self, event: dict) -> None:
        with open(self.state_dir / self.EVENTS, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()

    def submit(self, script: str) -> str:
        with self._lock:
            sched = self._load()
            job_id = sched.submit(script)
            self._append({"kind": "submit", "at": sched.now, "script": script})
            return job_id

    def cancel(self, job_id: str) -> None:
        with self._lock:
            sched = self._load()
            sched.cancel(job_id)
            self._append({"kind": "cancel", "at": sched.now, "job_id": job_id})

    def status(self, job_id: str) -> str:
        with self._lock:
            return self._load().status(job_id)

    def submission_count(self) -> int:
        with self._lock:
            return len(self._load().submission_log)
