"""Broker operations: token issue, registration, submission, approval gating,
agent claim/report, artifact retention, and the audit query surface.

All operations run under one lock, so the audit log is a linearization of
everything that happened. State changes are committed to the log before they
are applied (see store.py), which is what makes kill-and-restart safe.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
import threading
from pathlib import Path
from typing import Callable, Optional

from pydantic import ValidationError

from ..protocol import (
    ArtifactBundle,
    ArtifactFile,
    AuditAction,
    AuditEvent,
    BearerToken,
    Credential,
    EndpointMode,
    EndpointRecord,
    EndpointStatus,
    EndpointTemplate,
    FunctionRecord,
    PayloadKind,
    ProviderKind,
    RunState,
    TaskKind,
    TaskResult,
    TaskRun,
    TaskSpec,
    allow_list_permits,
    new_id,
    now_ms,
    shortest_path,
)
from . import errors
from .auth import (
    digests_equal,
    dummy_verify,
    hash_client_secret,
    new_opaque_secret,
    sha256_hex,
    verify_client_secret,
)
from .store import BrokerStore, PendingEvent

SYSTEM_ACTOR = "system"


@dataclasses.dataclass(frozen=True)
class BrokerConfig:
    token_ttl_seconds: int = 3600
    approval_ttl_seconds: int = 7 * 86400
    heartbeat_timeout_seconds: int = 60
    long_poll_cap_seconds: float = 25.0
    default_retention_days: int = 90
    fsync: bool = False


@dataclasses.dataclass(frozen=True)
class TaskAssignment:
    """One claimed run handed to an agent, with the function payload inlined
    so the agent needs no second fetch."""

    run_id: str
    spec: TaskSpec
    payload: Optional[str]


@dataclasses.dataclass(frozen=True)
class PollGrant:
    assignments: list[TaskAssignment]
    allow_list: tuple[str, ...]


def _agent_actor(endpoint_id: str) -> str:
    return f"agent:{endpoint_id}"


class Broker:
    def __init__(
        self,
        state_dir: Path | str,
        config: Optional[BrokerConfig] = None,
        clock: Callable[[], int] = now_ms,
    ):
        self.config = config or BrokerConfig()
        self.clock = clock
        self.lock = threading.RLock()
        self.store = BrokerStore(state_dir, fsync=self.config.fsync)
        self.store.open()
        # Ephemeral liveness; deliberately not persisted, so a restarted
        # broker shows endpoints offline until they poll again.
        self._heartbeats: dict[str, int] = {}

    # -- lifecycle -----------------------------------------------------------

    def snapshot(self) -> None:
        with self.lock:
            self.store.write_snapshot()

    def close(self) -> None:
        with self.lock:
            if not self.store.is_open:
                return
            self.store.write_snapshot()
            self.store.close()

    # -- credentials (bootstrap, not part of the HTTP surface) ---------------

    def add_credential(self, client_id: str, client_secret: str, owner_identity: str) -> None:
        with self.lock:
            self.store.state.credentials[client_id] = Credential(
                client_id=client_id,
                client_secret_hash=hash_client_secret(client_secret),
                owner_identity=owner_identity,
            )
            # Credentials live only in snapshots, so persist immediately.
            self.store.write_snapshot()

    # -- authentication -------------------------------------------------------

    def issue_token(self, client_id: str, client_secret: str) -> BearerToken:
        with self.lock:
            now = self.clock()
            cred = self.store.state.credentials.get(client_id)
            if cred is None:
                # Burn the same hashing cost as a real check.
                dummy_verify(client_secret)
                ok = False
            else:
                ok = verify_client_secret(client_secret, cred.client_secret_hash)
            if not ok:
                self.store.commit(
                    [
                        PendingEvent(
                            timestamp=now,
                            actor=client_id,
                            action=AuditAction.AUTH_FAILURE,
                            subject=client_id,
                            details={"reason": "bad_credentials"},
                        )
                    ]
                )
                raise errors.auth_failure()
            token = new_opaque_secret()
            expires_at = now + self.config.token_ttl_seconds * 1000
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=now,
                        actor=cred.owner_identity,
                        action=AuditAction.TOKEN_ISSUED,
                        subject=client_id,
                        details={
                            "token_sha256": sha256_hex(token),
                            "subject": cred.owner_identity,
                            "issued_at": now,
                            "expires_at": expires_at,
                        },
                    )
                ]
            )
            return BearerToken(
                token=token, subject=cred.owner_identity, issued_at=now, expires_at=expires_at
            )

    def _subject(self, token: Optional[str]) -> str:
        record = self.store.state.tokens.get(sha256_hex(token or ""))
        if record is None or record.expires_at <= self.clock():
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=self.clock(),
                        actor="anonymous",
                        action=AuditAction.AUTH_FAILURE,
                        subject="token",
                        details={"reason": "invalid_token"},
                    )
                ]
            )
            raise errors.invalid_token()
        return record.subject

    def _agent_endpoint(self, endpoint_id: str, agent_key: Optional[str]) -> EndpointRecord:
        endpoint = self.store.state.endpoints.get(endpoint_id)
        if endpoint is None:
            raise errors.unknown("endpoint", endpoint_id)
        if not digests_equal(sha256_hex(agent_key or ""), endpoint.agent_key_hash):
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=self.clock(),
                        actor=_agent_actor(endpoint_id),
                        action=AuditAction.AUTH_FAILURE,
                        subject=endpoint_id,
                        details={"reason": "invalid_agent_key"},
                    )
                ]
            )
            raise errors.invalid_agent_key()
        return endpoint

    # -- registration ----------------------------------------------------------

    def register_endpoint(
        self,
        token: str,
        *,
        display_name: str,
        mode: EndpointMode,
        protected: bool = False,
        reviewer: Optional[str] = None,
        allow_list: tuple[str, ...] = (),
        template: Optional[dict] = None,
    ) -> tuple[EndpointRecord, str]:
        """Returns the stored record and the agent key. The key is shown
        exactly once; only its hash is retained."""
        with self.lock:
            subject = self._subject(token)
            now = self.clock()
            endpoint_id = new_id()
            agent_key = new_opaque_secret()
            template_record = None
            if template is not None:
                try:
                    template_record = EndpointTemplate(
                        template_id=new_id(),
                        provider_kind=ProviderKind(template["provider_kind"]),
                        pilot_size=template.get("pilot_size", 1),
                        batch_directives=template.get("batch_directives", {}),
                        workspace_root=template["workspace_root"],
                        identity_map_ref=template.get("identity_map_ref", ""),
                    )
                except (ValidationError, KeyError, ValueError) as exc:
                    raise errors.invalid_descriptor(f"bad template: {exc}") from exc
            try:
                record = EndpointRecord(
                    endpoint_id=endpoint_id,
                    display_name=display_name,
                    mode=mode,
                    protected=protected,
                    reviewer=reviewer,
                    allow_list=allow_list,
                    template_id=template_record.template_id if template_record else None,
                    agent_key_hash=sha256_hex(agent_key),
                )
            except ValidationError as exc:
                raise errors.invalid_descriptor(exc.errors()[0]["msg"]) from exc
            details: dict[str, object] = {"record": record.model_dump(mode="json")}
            if template_record is not None:
                details["template"] = template_record.model_dump(mode="json")
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=now,
                        actor=subject,
                        action=AuditAction.ENDPOINT_REGISTERED,
                        subject=endpoint_id,
                        details=details,
                    )
                ]
            )
            return record, agent_key

    def register_function(
        self, token: str, *, payload_kind: PayloadKind, payload: str
    ) -> FunctionRecord:
        with self.lock:
            subject = self._subject(token)
            if not payload.strip():
                raise errors.empty_payload()
            now = self.clock()
            record = FunctionRecord(
                function_id=new_id(),
                owner=subject,
                payload_kind=payload_kind,
                payload=payload,
                registered_at=now,
            )
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=now,
                        actor=subject,
                        action=AuditAction.FUNCTION_REGISTERED,
                        subject=record.function_id,
                        details={"record": record.model_dump(mode="json")},
                    )
                ]
            )
            return record

    def list_functions(self, token: str) -> list[FunctionRecord]:
        with self.lock:
            self._subject(token)
            return list(self.store.state.functions.values())

    # -- submission and approval ------------------------------------------------

    def submit_task(self, token: str, fields: dict) -> TaskRun:
        with self.lock:
            subject = self._subject(token)
            endpoint = self.store.state.endpoints.get(fields.get("endpoint_id", ""))
            if endpoint is None:
                raise errors.unknown("endpoint", str(fields.get("endpoint_id")))
            try:
                spec = TaskSpec(**{**fields, "requested_by": subject})
            except (ValidationError, TypeError) as exc:
                message = exc.errors()[0]["msg"] if isinstance(exc, ValidationError) else str(exc)
                raise errors.invalid_spec(message) from exc
            if spec.kind is TaskKind.FUNCTION and spec.function_id not in self.store.state.functions:
                raise errors.invalid_spec(f"unknown function_id: {spec.function_id}")
            if not allow_list_permits(endpoint.allow_list, spec):
                raise errors.function_not_allowed(spec.function_id)
            now = self.clock()
            run_id = new_id()
            gate = RunState.PENDING_APPROVAL if endpoint.protected else RunState.QUEUED
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=now,
                        actor=subject,
                        action=AuditAction.TASK_SUBMITTED,
                        subject=run_id,
                        details={"spec": spec.model_dump(mode="json")},
                    ),
                    self._transition(run_id, RunState.SUBMITTED, gate, SYSTEM_ACTOR, now),
                ]
            )
            return self.store.state.runs[run_id]

    def approve(self, token: str, run_id: str) -> TaskRun:
        return self._decide(token, run_id, approve=True)

    def reject(self, token: str, run_id: str) -> TaskRun:
        return self._decide(token, run_id, approve=False)

    def _decide(self, token: str, run_id: str, *, approve: bool) -> TaskRun:
        with self.lock:
            subject = self._subject(token)
            run = self.store.state.runs.get(run_id)
            if run is None:
                raise errors.unknown("run", run_id)
            endpoint = self.store.state.endpoints[run.spec.endpoint_id]
            if endpoint.reviewer != subject:
                raise errors.not_reviewer()
            now = self.clock()
            run = self._expire_if_due(run, now)
            if run.state is not RunState.PENDING_APPROVAL:
                raise errors.wrong_state(f"run is {run.state.value}, not pending_approval")
            if approve:
                decision = AuditAction.APPROVAL_GRANTED
                target = RunState.QUEUED
            else:
                decision = AuditAction.APPROVAL_REJECTED
                target = RunState.REJECTED
            self.store.commit(
                [
                    PendingEvent(
                        timestamp=now,
                        actor=subject,
                        action=decision,
                        subject=run_id,
                        details={"endpoint_id": endpoint.endpoint_id},
                    ),
                    self._transition(run_id, RunState.PENDING_APPROVAL, target, subject, now),
                ]
            )
            return self.store.state.runs[run_id]

    def _transition(
        self, run_id: str, from_state: RunState, to_state: RunState, actor: str, now: int
    ) -> PendingEvent:
        return PendingEvent(
            timestamp=now,
            actor=actor,
            action=AuditAction.STATE_CHANGED,
            subject=run_id,
            details={"from_state": from_state.value, "to_state": to_state.value},
        )

    def _expire_if_due(self, run: TaskRun, now: int) -> TaskRun:
        if run.state is RunState.PENDING_APPROVAL:
            entered_at = run.transitions[-1].at
            if now - entered_at > self.config.approval_ttl_seconds * 1000:
                self.store.commit(
                    [
                        self._transition(
                            run.run_id, RunState.PENDING_APPROVAL, RunState.EXPIRED, SYSTEM_ACTOR, now
                        )
                    ]
                )
                return self.store.state.runs[run.run_id]
        return run

    # -- reads -------------------------------------------------------------------

    def get_run(self, token: str, run_id: str) -> TaskRun:
        with self.lock:
            self._subject(token)
            run = self.store.state.runs.get(run_id)
            if run is None:
                raise errors.unknown("run", run_id)
            return self._expire_if_due(run, self.clock())

    def get_result(self, token: str, run_id: str) -> TaskResult:
        with self.lock:
            run = self.get_run(token, run_id)
            if run.result is None:
                raise errors.not_terminal()
            return run.result

    def list_runs(
        self,
        token: str,
        *,
        state: Optional[RunState] = None,
        endpoint_id: Optional[str] = None,
    ) -> list[TaskRun]:
        with self.lock:
            self._subject(token)
            now = self.clock()
            out = []
            for run in list(self.store.state.runs.values()):
                run = self._expire_if_due(run, now)
                if state is not None and run.state is not state:
                    continue
                if endpoint_id is not None and run.spec.endpoint_id != endpoint_id:
                    continue
                out.append(run)
            return out

    def list_endpoints(self, token: str) -> list[EndpointRecord]:
        with self.lock:
            self._subject(token)
            now = self.clock()
            out = []
            for record in self.store.state.endpoints.values():
                beat = self._heartbeats.get(record.endpoint_id, 0)
                online = now - beat <= self.config.heartbeat_timeout_seconds * 1000
                out.append(
                    record.model_copy(
                        update={
                            "status": EndpointStatus.ONLINE if beat and online else EndpointStatus.OFFLINE,
                            "last_heartbeat": beat,
                        }
                    )
                )
            return out

    def run_artifacts(self, token: str, run_id: str) -> list[ArtifactBundle]:
        with self.lock:
            self._subject(token)
            if run_id not in self.store.state.runs:
                raise errors.unknown("run", run_id)
            return [b for b in self.store.state.artifacts.values() if b.run_id == run_id]

    def get_artifact(self, token: str, artifact_id: str) -> tuple[ArtifactBundle, Optional[dict[str, bytes]]]:
        """Returns the bundle plus file contents, or None contents when the
        bundle has been purged (metadata outlives the bytes)."""
        with self.lock:
            self._subject(token)
            bundle = self.store.state.artifacts.get(artifact_id)
            if bundle is None:
                raise errors.unknown("artifact", artifact_id)
            if bundle.purged:
                return bundle, None
            root = self.store.artifact_dir(artifact_id)
            contents = {f.relative_path: (root / f.relative_path).read_bytes() for f in bundle.files}
            return bundle, contents

    def query_audit(
        self,
        token: str,
        *,
        subject: Optional[str] = None,
        action: Optional[AuditAction] = None,
        seq_from: Optional[int] = None,
        seq_to: Optional[int] = None,
    ) -> list[AuditEvent]:
        with self.lock:
            self._subject(token)
            out = []
            for event in self.store.events:
                if subject is not None and event.subject != subject:
                    continue
                if action is not None and event.action is not action:
                    continue
                if seq_from is not None and event.seq < seq_from:
                    continue
                if seq_to is not None and event.seq > seq_to:
                    continue
                out.append(event)
            return out

    # -- agent side -----------------------------------------------------------------

    def agent_poll(self, endpoint_id: str, agent_key: str, *, max_tasks: int = 1) -> PollGrant:
        """One claim attempt: FIFO over queued runs for this endpoint. Also
        doubles as the heartbeat."""
        with self.lock:
            endpoint = self._agent_endpoint(endpoint_id, agent_key)
            now = self.clock()
            self._heartbeats[endpoint_id] = now
            actor = _agent_actor(endpoint_id)
            assignments: list[TaskAssignment] = []
            for run in list(self.store.state.runs.values()):
                if len(assignments) >= max_tasks:
                    break
                if run.state is not RunState.QUEUED or run.spec.endpoint_id != endpoint_id:
                    continue
                if not allow_list_permits(endpoint.allow_list, run.spec):
                    # Queued before the rule would have blocked it; never
                    # hand it out.
                    self._fail_undispatchable(run, now)
                    continue
                payload = None
                if run.spec.kind is TaskKind.FUNCTION:
                    payload = self.store.state.functions[run.spec.function_id].payload
                self.store.commit(
                    [
                        PendingEvent(
                            timestamp=now,
                            actor=actor,
                            action=AuditAction.TASK_CLAIMED,
                            subject=run.run_id,
                            details={"claimed_by": actor},
                        ),
                        self._transition(run.run_id, RunState.QUEUED, RunState.CLAIMED, actor, now),
                    ]
                )
                assignments.append(
                    TaskAssignment(run_id=run.run_id, spec=run.spec, payload=payload)
                )
            return PollGrant(assignments=assignments, allow_list=endpoint.allow_list)

    def _fail_undispatchable(self, run: TaskRun, now: int) -> None:
        result = TaskResult(
            exit_code=-1,
            stdout="",
            stderr="refused at dispatch: endpoint allow-list does not permit this task",
            duration_seconds=0.0,
        )
        self.store.commit(
            [
                PendingEvent(
                    timestamp=now,
                    actor=SYSTEM_ACTOR,
                    action=AuditAction.TASK_CLAIMED,
                    subject=run.run_id,
                    details={"claimed_by": SYSTEM_ACTOR},
                ),
                self._transition(run.run_id, RunState.QUEUED, RunState.CLAIMED, SYSTEM_ACTOR, now),
                PendingEvent(
                    timestamp=now,
                    actor=SYSTEM_ACTOR,
                    action=AuditAction.RESULT_REPORTED,
                    subject=run.run_id,
                    details={
                        "terminal_state": RunState.FAILED.value,
                        "result": result.model_dump(mode="json"),
                        "fingerprint": _result_fingerprint(RunState.FAILED, result, []),
                    },
                ),
                self._transition(run.run_id, RunState.CLAIMED, RunState.STAGING, SYSTEM_ACTOR, now),
                self._transition(run.run_id, RunState.STAGING, RunState.FAILED, SYSTEM_ACTOR, now),
            ]
        )

    def report_state(
        self, endpoint_id: str, agent_key: str, run_id: str, new_state: RunState
    ) -> TaskRun:
        """Progress markers from the agent: claimed -> staging -> running."""
        with self.lock:
            self._agent_endpoint(endpoint_id, agent_key)
            run = self.store.state.runs.get(run_id)
            if run is None:
                raise errors.unknown("run", run_id)
            actor = _agent_actor(endpoint_id)
            if run.claimed_by != actor:
                raise errors.not_claimant()
            if new_state not in (RunState.STAGING, RunState.RUNNING):
                raise errors.wrong_state(f"{new_state.value} is not a progress marker")
            if run.state is new_state:
                return run
            if (run.state, new_state) not in {
                (RunState.CLAIMED, RunState.STAGING),
                (RunState.STAGING, RunState.RUNNING),
            }:
                raise errors.wrong_state(f"cannot move {run.state.value} -> {new_state.value}")
            self.store.commit(
                [self._transition(run_id, run.state, new_state, actor, self.clock())]
            )
            return self.store.state.runs[run_id]

    def report_result(
        self,
        endpoint_id: str,
        agent_key: str,
        run_id: str,
        *,
        terminal_state: RunState,
        result: TaskResult,
        files: list[tuple[str, bytes]],
    ) -> tuple[TaskRun, ArtifactBundle]:
        """Deliver the outcome plus artifact files. Duplicate deliveries of
        the identical outcome are acknowledged without effect."""
        with self.lock:
            self._agent_endpoint(endpoint_id, agent_key)
            run = self.store.state.runs.get(run_id)
            if run is None:
                raise errors.unknown("run", run_id)
            actor = _agent_actor(endpoint_id)
            if run.claimed_by != actor:
                raise errors.not_claimant()
            fingerprint = _result_fingerprint(terminal_state, result, files)
            if run.is_terminal():
                if self.store.state.result_fingerprints.get(run_id) == fingerprint:
                    return run, self._bundle_for(run_id)
                raise errors.wrong_state("run already holds a different result")
            if terminal_state not in (RunState.COMPLETED, RunState.FAILED):
                raise errors.invalid_result("terminal state must be completed or failed")
            if (terminal_state is RunState.COMPLETED) != (result.exit_code == 0):
                raise errors.invalid_result(
                    f"exit code {result.exit_code} disagrees with state {terminal_state.value}"
                )
            path = shortest_path(run.state, terminal_state)
            if path is None:
                raise errors.wrong_state(
                    f"no legal path from {run.state.value} to {terminal_state.value}"
                )
            now = self.clock()
            bundle = self._write_artifact_files(run_id, files, now)
            events = [
                PendingEvent(
                    timestamp=now,
                    actor=actor,
                    action=AuditAction.RESULT_REPORTED,
                    subject=run_id,
                    details={
                        "terminal_state": terminal_state.value,
                        "result": result.model_dump(mode="json"),
                        "fingerprint": fingerprint,
                    },
                )
            ]
            events.extend(
                self._transition(run_id, a, b, actor, now) for a, b in zip(path, path[1:])
            )
            events.append(
                PendingEvent(
                    timestamp=now,
                    actor=actor,
                    action=AuditAction.ARTIFACT_STORED,
                    subject=bundle.artifact_id,
                    details={"bundle": bundle.model_dump(mode="json")},
                )
            )
            self.store.commit(events)
            return self.store.state.runs[run_id], bundle

    def _bundle_for(self, run_id: str) -> ArtifactBundle:
        for bundle in self.store.state.artifacts.values():
            if bundle.run_id == run_id:
                return bundle
        raise errors.unknown("artifact", f"run:{run_id}")

    def _write_artifact_files(
        self, run_id: str, files: list[tuple[str, bytes]], now: int
    ) -> ArtifactBundle:
        seen = set()
        for rel, _ in files:
            parts = Path(rel).parts
            if not rel or rel.startswith("/") or ".." in parts or rel in seen:
                raise errors.invalid_result(f"bad artifact path: {rel!r}")
            seen.add(rel)
        artifact_id = new_id()
        root = self.store.artifact_dir(artifact_id)
        entries = []
        for rel, content in files:
            target = root / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
            entries.append(
                ArtifactFile(
                    relative_path=rel,
                    byte_size=len(content),
                    digest=hashlib.sha256(content).hexdigest(),
                )
            )
        return ArtifactBundle(
            artifact_id=artifact_id,
            run_id=run_id,
            files=tuple(entries),
            created_at=now,
            retention_days=self.config.default_retention_days,
        )

    # -- sweeps ---------------------------------------------------------------------

    def sweep_retention(self, now: Optional[int] = None) -> list[str]:
        """Purge artifact contents strictly older than their retention window.
        A bundle exactly at the boundary is kept."""
        with self.lock:
            now = self.clock() if now is None else now
            purged = []
            for bundle in list(self.store.state.artifacts.values()):
                if bundle.purged:
                    continue
                if now - bundle.created_at > bundle.retention_days * 86_400_000:
                    shutil.rmtree(self.store.artifact_dir(bundle.artifact_id), ignore_errors=True)
                    self.store.commit(
                        [
                            PendingEvent(
                                timestamp=now,
                                actor=SYSTEM_ACTOR,
                                action=AuditAction.ARTIFACT_PURGED,
                                subject=bundle.artifact_id,
                                details={"run_id": bundle.run_id},
                            )
                        ]
                    )
                    purged.append(bundle.artifact_id)
            return purged

    def sweep_expiry(self, now: Optional[int] = None) -> int:
        with self.lock:
            now = self.clock() if now is None else now
            count = 0
            for run in list(self.store.state.runs.values()):
                if run.state is RunState.PENDING_APPROVAL:
                    if self._expire_if_due(run, now).state is RunState.EXPIRED:
                        count += 1
            return count


def _result_fingerprint(
    terminal_state: RunState, result: TaskResult, files: list[tuple[str, bytes]]
) -> str:
    canonical = json.dumps(
        {
            "terminal_state": terminal_state.value,
            "result": result.model_dump(mode="json"),
            "files": sorted(
                (rel, hashlib.sha256(content).hexdigest()) for rel, content in files
            ),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
