"""The long-running agent process: polls the broker over outbound HTTP,
maps requester identities to local accounts, and executes claimed tasks
through a local or batch-backed worker provider.

The agent never listens on a socket. Everything, including result and
artifact delivery, happens over connections the agent itself opens.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Optional, Union

from ..protocol import RunState, TaskResult, allow_list_permits
from ..providers import BatchProvider, LocalWorkerPool
from .client import AgentAuthError, AgentClient, Assignment, BrokerRejection, BrokerUnavailable
from .config import AgentConfig
from .execution import capture_provenance, resolve_tool_versions, run_task

log = logging.getLogger(__name__)

BACKOFF_INITIAL_SECONDS = 1.0
BACKOFF_CAP_SECONDS = 60.0
DELIVERY_ATTEMPTS = 5
INFLIGHT_FILE = "inflight.json"


def _failure_result(reason: str, detail: str, tool_versions: dict[str, str]) -> TaskResult:
    return TaskResult(
        exit_code=-1,
        stdout="",
        stderr=f"{detail} ({reason})",
        duration_seconds=0.0,
        provenance=capture_provenance({}, tool_versions),
    )


class _UserContext:
    """Execution context for one local account: a private workspace and a
    worker provider feeding it."""

    def __init__(self, daemon: "AgentDaemon", local_account: str):
        self.local_account = local_account
        self.workspace = daemon.config.template.workspace_root / local_account
        # Other accounts on the host must not be able to read this user's
        # checkouts or artifacts.
        self.workspace.mkdir(parents=True, exist_ok=True)
        os.chmod(self.workspace, 0o700)
        self.provider = daemon._build_provider(self)

    def submit(self, assignment: Assignment) -> None:
        self.provider.submit(assignment)

    def shutdown(self) -> None:
        self.provider.shutdown(wait=True)


class AgentDaemon:
    def __init__(self, config: AgentConfig, *, client: Optional[AgentClient] = None):
        self.config = config
        self.client = client or AgentClient(
            config.broker_url, config.endpoint_id, config.agent_key
        )
        self._contexts: dict[str, _UserContext] = {}
        self._tool_versions = resolve_tool_versions()
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._inflight: dict[str, dict] = {}
        self._restart_reports: dict[str, dict] = {}
        self._backoff = BACKOFF_INITIAL_SECONDS
        self.fatal_error: Optional[AgentAuthError] = None
        self.config.template.workspace_root.mkdir(parents=True, exist_ok=True)
        self._load_inflight()

    # ------------------------------------------------------------------
    # crash recovery bookkeeping

    @property
    def _inflight_path(self) -> Path:
        return self.config.template.workspace_root / INFLIGHT_FILE

    def _load_inflight(self) -> None:
        if not self._inflight_path.exists():
            return
        try:
            persisted = json.loads(self._inflight_path.read_text("utf-8"))
        except (OSError, ValueError):
            log.warning("inflight state unreadable, discarding: %s", self._inflight_path)
            return
        # Anything recorded as in flight by a previous process was lost
        # when that process died; the broker must hear about it.
        self._restart_reports = dict(persisted.get("runs", {}))

    def _persist_inflight(self) -> None:
        data = {"runs": dict(self._inflight)}
        tmp = self._inflight_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, sort_keys=True), "utf-8")
        os.replace(tmp, self._inflight_path)

    def _mark_inflight(self, assignment: Assignment) -> None:
        with self._lock:
            self._inflight[assignment.run_id] = {
                "requested_by": assignment.spec.requested_by,
                "endpoint_id": assignment.spec.endpoint_id,
            }
            self._persist_inflight()

    def _clear_inflight(self, run_id: str) -> None:
        with self._lock:
            self._inflight.pop(run_id, None)
            self._persist_inflight()

    def flush_restart_reports(self) -> None:
        """Tell the broker about tasks a previous agent process lost."""
        for run_id in list(self._restart_reports):
            result = _failure_result(
                "agent_restart",
                "agent restarted while the task was in flight; output was lost",
                self._tool_versions,
            )
            try:
                self.client.report_result(
                    run_id, terminal_state=RunState.FAILED, result=result, files=[]
                )
            except BrokerRejection as exc:
                # Most likely the run already reached a terminal state.
                log.info("restart report for %s rejected: %s", run_id, exc.code)
            except BrokerUnavailable:
                return
            del self._restart_reports[run_id]

    # ------------------------------------------------------------------
    # per-account contexts

    def _build_provider(self, ctx: _UserContext) -> Union[LocalWorkerPool, BatchProvider]:
        template = self.config.template

        def handle(item: object) -> None:
            assert isinstance(item, Assignment)
            self._execute(ctx, item)

        if template.provider_kind == "local":
            return LocalWorkerPool(
                template.pilot_size, handle, name_prefix=f"task-{ctx.local_account}"
            )
        assert template.batch_commands is not None
        return BatchProvider(
            template.batch_commands,
            pilot_size=template.pilot_size,
            directives=template.batch_directives,
            script_dir=ctx.workspace / "pilots",
            handler=handle,
        )

    def _context_for(self, local_account: str) -> _UserContext:
        ctx = self._contexts.get(local_account)
        if ctx is None:
            ctx = _UserContext(self, local_account)
            self._contexts[local_account] = ctx
        return ctx

    # ------------------------------------------------------------------
    # task handling

    def _report_state(self, run_id: str, state: RunState) -> None:
        # Progress markers are advisory; a missed one must not kill the task.
        try:
            self.client.report_state(run_id, state)
        except (BrokerUnavailable, BrokerRejection) as exc:
            log.warning("state report %s for %s not accepted: %s", state.value, run_id, exc)

    def _deliver(
        self,
        run_id: str,
        terminal_state: RunState,
        result: TaskResult,
        files: list[tuple[str, bytes]],
    ) -> bool:
        delay = BACKOFF_INITIAL_SECONDS
        for attempt in range(DELIVERY_ATTEMPTS):
            try:
                self.client.report_result(
                    run_id, terminal_state=terminal_state, result=result, files=files
                )
                self._clear_inflight(run_id)
                return True
            except BrokerRejection as exc:
                # A rejected result will never be accepted on retry. Keep the
                # inflight marker out of the file; there is nothing to recover.
                log.error("result for %s rejected by broker: %s: %s", run_id, exc.code, exc)
                self._clear_inflight(run_id)
                return False
            except BrokerUnavailable as exc:
                log.warning(
                    "broker unavailable delivering result for %s (attempt %d/%d): %s",
                    run_id,
                    attempt + 1,
                    DELIVERY_ATTEMPTS,
                    exc,
                )
                if self._stop.wait(delay):
                    break
                delay = min(delay * 2, BACKOFF_CAP_SECONDS)
        # Leave the inflight record in place: if the agent restarts it will
        # at least report the run as lost.
        log.error("giving up delivering result for %s; run stays in flight", run_id)
        return False

    def _fail_without_running(self, assignment: Assignment, reason: str, detail: str) -> None:
        self._mark_inflight(assignment)
        result = _failure_result(reason, detail, self._tool_versions)
        self._deliver(assignment.run_id, RunState.FAILED, result, [])

    def _execute(self, ctx: _UserContext, assignment: Assignment) -> None:
        self._report_state(assignment.run_id, RunState.STAGING)
        try:
            outcome = run_task(
                assignment.spec,
                assignment.payload,
                ctx.workspace,
                self._tool_versions,
                on_running=lambda: self._report_state(assignment.run_id, RunState.RUNNING),
            )
        except Exception as exc:  # noqa: BLE001 - a broken task must not kill the worker
            log.exception("task %s raised during execution", assignment.run_id)
            result = _failure_result(
                "agent_error", f"agent failed to execute the task: {exc}", self._tool_versions
            )
            self._deliver(assignment.run_id, RunState.FAILED, result, [])
            return
        self._deliver(assignment.run_id, outcome.terminal_state, outcome.result, outcome.files)

    def _dispatch(self, assignment: Assignment, allow_list: tuple[str, ...]) -> None:
        spec = assignment.spec
        if not allow_list_permits(allow_list, spec):
            # The broker enforces this too; a second check here keeps a
            # misbehaving broker from pushing arbitrary commands onto the host.
            self._fail_without_running(
                assignment,
                "allow_list_violation",
                "task is not permitted by the endpoint allow list",
            )
            return
        local_account = self.config.identity_map.get(spec.requested_by)
        if local_account is None:
            self._fail_without_running(
                assignment,
                "unmapped_identity",
                f"no local account mapped for identity {spec.requested_by!r}",
            )
            return
        self._mark_inflight(assignment)
        self._context_for(local_account).submit(assignment)

    # ------------------------------------------------------------------
    # main loop

    def step(self) -> int:
        """One poll cycle. Returns the number of assignments dispatched."""
        self.flush_restart_reports()
        assignments, allow_list = self.client.poll(
            max_tasks=self.config.template.pilot_size,
            wait_seconds=self.config.poll_interval_seconds,
        )
        for assignment in assignments:
            self._dispatch(assignment, allow_list)
        return len(assignments)

    def run(self) -> None:
        log.info(
            "agent for endpoint %s polling %s",
            self.config.endpoint_id,
            self.config.broker_url,
        )
        try:
            while not self._stop.is_set():
                try:
                    self.step()
                except BrokerUnavailable as exc:
                    log.warning("broker unavailable, retrying in %.0fs: %s", self._backoff, exc)
                    self._stop.wait(self._backoff)
                    self._backoff = min(self._backoff * 2, BACKOFF_CAP_SECONDS)
                except AgentAuthError as exc:
                    # Wrong key or deleted endpoint: retrying cannot help.
                    log.error("broker refused the agent identity: %s", exc)
                    self.fatal_error = exc
                    return
                except BrokerRejection as exc:
                    log.error("unexpected broker rejection while polling: %s", exc)
                    self._stop.wait(self._backoff)
                    self._backoff = min(self._backoff * 2, BACKOFF_CAP_SECONDS)
                else:
                    self._backoff = BACKOFF_INITIAL_SECONDS
        finally:
            self.shutdown()

    def stop(self) -> None:
        self._stop.set()

    def shutdown(self) -> None:
        self._stop.set()
        for ctx in self._contexts.values():
            ctx.shutdown()
        self._contexts.clear()
