"""Durable broker state: an append-only audit log plus periodic snapshots.

Every mutation is expressed as AuditEvents. Events are written (and flushed)
to audit.jsonl first, then applied to the in-memory state through the same
reducer that recovery uses, so a process killed between operations restarts
into exactly the state a replay of the log produces.

Layout under the state directory:

    audit.jsonl     one AuditEvent per line, seq dense from 1, never rewritten
    snapshot.json   reduced state as of snapshot.last_seq
    artifacts/<artifact_id>/<files...>   retained run outputs
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Iterable, Optional

from ..protocol import (
    INITIAL_STATE,
    ArtifactBundle,
    AuditAction,
    AuditEvent,
    Credential,
    EndpointRecord,
    EndpointTemplate,
    FunctionRecord,
    RunState,
    TaskResult,
    TaskRun,
    TaskSpec,
    Transition,
    decode_message,
    encode_message,
)

log = logging.getLogger(__name__)

SNAPSHOT_FORMAT = 1


@dataclasses.dataclass
class TokenRecord:
    token_sha256: str
    subject: str
    issued_at: int
    expires_at: int


@dataclasses.dataclass
class PendingEvent:
    """An event the core wants committed; seq is assigned by the store."""

    timestamp: int
    actor: str
    action: AuditAction
    subject: str
    details: dict[str, object] = dataclasses.field(default_factory=dict)


class StoreState:
    """Mutable in-memory image of everything the broker knows."""

    def __init__(self) -> None:
        self.credentials: dict[str, Credential] = {}
        self.tokens: dict[str, TokenRecord] = {}
        self.endpoints: dict[str, EndpointRecord] = {}
        self.templates: dict[str, EndpointTemplate] = {}
        self.functions: dict[str, FunctionRecord] = {}
        # Insertion order doubles as submission order for FIFO claiming.
        self.runs: dict[str, TaskRun] = {}
        self.artifacts: dict[str, ArtifactBundle] = {}
        self.result_fingerprints: dict[str, str] = {}
        # Result delivered but final transition not applied yet; only ever
        # non-empty in the middle of applying one operation's event batch.
        self.pending_results: dict[str, TaskResult] = {}


def apply_event(state: StoreState, event: AuditEvent) -> None:
    """Fold one event into the state. The single source of truth for what
    each audit action means; live mutation and crash recovery both run
    through here."""
    action = event.action
    details = event.details
    if action is AuditAction.TOKEN_ISSUED:
        record = TokenRecord(
            token_sha256=str(details["token_sha256"]),
            subject=str(details["subject"]),
            issued_at=int(details["issued_at"]),  # type: ignore[arg-type]
            expires_at=int(details["expires_at"]),  # type: ignore[arg-type]
        )
        state.tokens[record.token_sha256] = record
    elif action is AuditAction.ENDPOINT_REGISTERED:
        record = EndpointRecord.model_validate(details["record"])
        state.endpoints[record.endpoint_id] = record
        if "template" in details:
            template = EndpointTemplate.model_validate(details["template"])
            state.templates[template.template_id] = template
    elif action is AuditAction.FUNCTION_REGISTERED:
        record = FunctionRecord.model_validate(details["record"])
        state.functions[record.function_id] = record
    elif action is AuditAction.TASK_SUBMITTED:
        spec = TaskSpec.model_validate(details["spec"])
        state.runs[event.subject] = TaskRun(
            run_id=event.subject, spec=spec, state=INITIAL_STATE
        )
    elif action is AuditAction.TASK_CLAIMED:
        run = state.runs[event.subject]
        state.runs[event.subject] = _rebuild(run, claimed_by=str(details["claimed_by"]))
    elif action is AuditAction.STATE_CHANGED:
        run = state.runs[event.subject]
        to_state = RunState(details["to_state"])
        transition = Transition(
            from_state=RunState(details["from_state"]),
            to_state=to_state,
            at=event.timestamp,
            actor=event.actor,
        )
        result = run.result
        if to_state in (RunState.COMPLETED, RunState.FAILED):
            if event.subject not in state.pending_results:
                raise RuntimeError(
                    f"run {event.subject} moved to {to_state.value} with no reported result"
                )
            result = state.pending_results.pop(event.subject)
        state.runs[event.subject] = _rebuild(
            run,
            state=to_state,
            transitions=run.transitions + (transition,),
            result=result,
        )
    elif action is AuditAction.RESULT_REPORTED:
        state.pending_results[event.subject] = TaskResult.model_validate(details["result"])
        state.result_fingerprints[event.subject] = str(details["fingerprint"])
    elif action is AuditAction.ARTIFACT_STORED:
        bundle = ArtifactBundle.model_validate(details["bundle"])
        state.artifacts[bundle.artifact_id] = bundle
    elif action is AuditAction.ARTIFACT_PURGED:
        bundle = state.artifacts[event.subject]
        state.artifacts[event.subject] = bundle.model_copy(update={"purged": True})
    elif action in (
        AuditAction.APPROVAL_GRANTED,
        AuditAction.APPROVAL_REJECTED,
        AuditAction.AUTH_FAILURE,
    ):
        # Recorded for the trail; any state effect rides on a paired
        # state_changed event.
        pass
    else:  # pragma: no cover - enum is closed
        raise RuntimeError(f"unhandled audit action {action}")


def reduce_events(events: Iterable[AuditEvent], into: Optional[StoreState] = None) -> StoreState:
    """Fold an event sequence into a state; the reference interpretation of
    the audit log."""
    state = into if into is not None else StoreState()
    for event in events:
        apply_event(state, event)
    return state


def _rebuild(run: TaskRun, **changes: object) -> TaskRun:
    # Full reconstruction instead of model_copy so the lifecycle validator
    # re-checks every mutation.
    fields = {
        "run_id": run.run_id,
        "spec": run.spec,
        "state": run.state,
        "transitions": run.transitions,
        "result": run.result,
        "claimed_by": run.claimed_by,
    }
    fields.update(changes)
    return TaskRun(**fields)  # type: ignore[arg-type]


class CorruptLogError(RuntimeError):
    pass


class BrokerStore:
    """Owns the state directory. Not thread-safe on its own; the broker
    serializes access."""

    def __init__(self, state_dir: Path | str, *, fsync: bool = False):
        self.state_dir = Path(state_dir)
        self.audit_path = self.state_dir / "audit.jsonl"
        self.snapshot_path = self.state_dir / "snapshot.json"
        self.artifact_root = self.state_dir / "artifacts"
        self._fsync = fsync
        self.state = StoreState()
        self.events: list[AuditEvent] = []
        self._next_seq = 1
        self._audit_file = None

    # -- lifecycle ---------------------------------------------------------

    def open(self) -> None:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.artifact_root.mkdir(exist_ok=True)
        snapshot_seq = self._load_snapshot()
        self._load_audit(snapshot_seq)
        self._audit_file = open(self.audit_path, "ab")

    def close(self) -> None:
        if self._audit_file is not None:
            self._audit_file.close()
            self._audit_file = None

    @property
    def is_open(self) -> bool:
        return self._audit_file is not None

    def _load_snapshot(self) -> int:
        if not self.snapshot_path.exists():
            return 0
        raw = json.loads(self.snapshot_path.read_text("utf-8"))
        if raw.get("format") != SNAPSHOT_FORMAT:
            raise CorruptLogError(f"unsupported snapshot format: {raw.get('format')}")
        state = self.state
        state.credentials = {
            k: Credential.model_validate(v) for k, v in raw["credentials"].items()
        }
        state.tokens = {k: TokenRecord(**v) for k, v in raw["tokens"].items()}
        state.endpoints = {
            k: EndpointRecord.model_validate(v) for k, v in raw["endpoints"].items()
        }
        state.templates = {
            k: EndpointTemplate.model_validate(v) for k, v in raw["templates"].items()
        }
        state.functions = {
            k: FunctionRecord.model_validate(v) for k, v in raw["functions"].items()
        }
        state.runs = {k: TaskRun.model_validate(v) for k, v in raw["runs"].items()}
        state.artifacts = {
            k: ArtifactBundle.model_validate(v) for k, v in raw["artifacts"].items()
        }
        state.result_fingerprints = dict(raw["result_fingerprints"])
        return int(raw["last_seq"])

    def _load_audit(self, snapshot_seq: int) -> None:
        if not self.audit_path.exists():
            self._next_seq = snapshot_seq + 1
            return
        raw = self.audit_path.read_bytes()
        lines = raw.splitlines(keepends=True)
        expected = 1
        valid_bytes = 0
        for i, line in enumerate(lines):
            if not line.strip():
                valid_bytes += len(line)
                continue
            try:
                event = decode_message(line.strip(), AuditEvent)
            except ValueError:
                if i == len(lines) - 1:
                    # Torn tail from a write cut short; the operation it
                    # belonged to was never acknowledged.
                    log.warning("dropping unparseable final audit line")
                    break
                raise CorruptLogError(f"unparseable audit line {i + 1}")
            if event.seq != expected:
                raise CorruptLogError(
                    f"audit seq gap: expected {expected}, found {event.seq} at line {i + 1}"
                )
            expected += 1
            self.events.append(event)
            if event.seq > snapshot_seq:
                apply_event(self.state, event)
            valid_bytes += len(line)
        if valid_bytes < len(raw):
            # Future appends must not land after the torn fragment.
            with open(self.audit_path, "r+b") as audit:
                audit.truncate(valid_bytes)
        if self.state.pending_results:
            # Tail loss split a result from its final transition; surface it
            # rather than serving half-applied runs.
            raise CorruptLogError(
                f"audit log ends mid-operation for runs: {sorted(self.state.pending_results)}"
            )
        self._next_seq = expected
        if snapshot_seq + 1 > self._next_seq:
            raise CorruptLogError(
                f"snapshot is ahead of the audit log ({snapshot_seq} > {expected - 1})"
            )

    # -- mutation ----------------------------------------------------------

    def commit(self, pending: list[PendingEvent]) -> list[AuditEvent]:
        """Assign sequence numbers, persist, then apply. All events of one
        operation are written in a single buffer so they land together."""
        assert self._audit_file is not None, "store is not open"
        events = []
        for p in pending:
            events.append(
                AuditEvent(
                    seq=self._next_seq + len(events),
                    timestamp=p.timestamp,
                    actor=p.actor,
                    action=p.action,
                    subject=p.subject,
                    details=p.details,
                )
            )
        buf = b"".join(encode_message(e) + b"\n" for e in events)
        self._audit_file.write(buf)
        self._audit_file.flush()
        if self._fsync:
            os.fsync(self._audit_file.fileno())
        for event in events:
            apply_event(self.state, event)
            self.events.append(event)
        self._next_seq += len(events)
        return events

    def last_seq(self) -> int:
        return self._next_seq - 1

    # -- snapshot ----------------------------------------------------------

    def write_snapshot(self) -> None:
        state = self.state
        payload = {
            "format": SNAPSHOT_FORMAT,
            "last_seq": self.last_seq(),
            "credentials": {k: v.model_dump(mode="json") for k, v in state.credentials.items()},
            "tokens": {k: dataclasses.asdict(v) for k, v in state.tokens.items()},
            "endpoints": {k: v.model_dump(mode="json") for k, v in state.endpoints.items()},
            "templates": {k: v.model_dump(mode="json") for k, v in state.templates.items()},
            "functions": {k: v.model_dump(mode="json") for k, v in state.functions.items()},
            "runs": {k: v.model_dump(mode="json") for k, v in state.runs.items()},
            "artifacts": {k: v.model_dump(mode="json") for k, v in state.artifacts.items()},
            "result_fingerprints": dict(state.result_fingerprints),
        }
        tmp = self.snapshot_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, indent=1), "utf-8")
        os.replace(tmp, self.snapshot_path)

    # -- artifact content ----------------------------------------------------

    def artifact_dir(self, artifact_id: str) -> Path:
        return self.artifact_root / artifact_id
