"""Shared domain types for the broker, agents, CLI, and dashboard.

Every type here is an immutable pydantic model with a fixed field set; the
canonical wire form is UTF-8 JSON with exactly these snake_case field names
(unknown fields are rejected on decode, see wire.py). Values are safe to
share across threads once constructed.
"""

from __future__ import annotations

import re
import time
import uuid
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .states import INITIAL_STATE, RunState, is_terminal, validate_transition

# Returned stdout/stderr are capped at 1 MiB each; the overflow is dropped
# and the corresponding *_truncated flag is set.
MAX_STREAM_BYTES = 1 << 20

# Environment keys matching this pattern never enter a provenance snapshot.
SECRET_ENV_PATTERN = re.compile(r"(SECRET|TOKEN|KEY|PASSWORD|CREDENTIAL)", re.IGNORECASE)


def now_ms() -> int:
    """Current UTC time as integer milliseconds since the Unix epoch."""
    return int(time.time() * 1000)


def new_id() -> str:
    """Random RFC-4122 identifier rendered as lowercase hex."""
    return str(uuid.uuid4())


def filter_captured_env(env: dict[str, str]) -> dict[str, str]:
    """Drop environment entries whose key matches the secret deny list."""
    return {k: v for k, v in env.items() if not SECRET_ENV_PATTERN.search(k)}


def truncate_stream(data: bytes) -> tuple[str, bool]:
    """Cap a captured output stream at MAX_STREAM_BYTES.

    Returns the decoded text and whether anything was dropped. Output is
    treated as UTF-8 text; undecodable bytes are replaced.
    """
    truncated = len(data) > MAX_STREAM_BYTES
    if truncated:
        data = data[:MAX_STREAM_BYTES]
    return data.decode("utf-8", errors="replace"), truncated


class ProtocolModel(BaseModel):
    """Base for all wire types: immutable, unknown fields rejected."""

    model_config = ConfigDict(frozen=True, extra="forbid")


class EndpointMode(str, Enum):
    SINGLE_USER = "single_user"
    MULTI_USER = "multi_user"


class EndpointStatus(str, Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class PayloadKind(str, Enum):
    SHELL_SCRIPT = "shell_script"


class TaskKind(str, Enum):
    SHELL = "shell"
    FUNCTION = "function"


class ProviderKind(str, Enum):
    LOCAL = "local"
    BATCH = "batch"


class AuditAction(str, Enum):
    TOKEN_ISSUED = "token_issued"
    ENDPOINT_REGISTERED = "endpoint_registered"
    FUNCTION_REGISTERED = "function_registered"
    TASK_SUBMITTED = "task_submitted"
    APPROVAL_GRANTED = "approval_granted"
    APPROVAL_REJECTED = "approval_rejected"
    TASK_CLAIMED = "task_claimed"
    STATE_CHANGED = "state_changed"
    RESULT_REPORTED = "result_reported"
    ARTIFACT_STORED = "artifact_stored"
    ARTIFACT_PURGED = "artifact_purged"
    AUTH_FAILURE = "auth_failure"


class Credential(ProtocolModel):
    """A client id/secret pair; only the salted hash of the secret is kept."""

    client_id: str
    client_secret_hash: str
    owner_identity: str


class BearerToken(ProtocolModel):
    token: str
    subject: str
    issued_at: int
    expires_at: int

    @model_validator(mode="after")
    def _expiry_after_issue(self) -> "BearerToken":
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be later than issued_at")
        return self


class EndpointTemplate(ProtocolModel):
    template_id: str
    provider_kind: ProviderKind
    pilot_size: int = Field(ge=1)
    batch_directives: dict[str, str] = Field(default_factory=dict)
    workspace_root: str
    identity_map_ref: str


class EndpointRecord(ProtocolModel):
    """A registered remote execution site and its protection policy."""

    endpoint_id: str
    display_name: str
    mode: EndpointMode
    protected: bool
    reviewer: Optional[str] = None
    allow_list: tuple[str, ...] = ()
    template_id: Optional[str] = None
    agent_key_hash: str
    status: EndpointStatus = EndpointStatus.OFFLINE
    last_heartbeat: int = 0

    @field_validator("allow_list", mode="before")
    @classmethod
    def _canonical_allow_list(cls, v):
        # Set semantics with a deterministic encoding: sorted, de-duplicated.
        return tuple(sorted(set(v)))

    @model_validator(mode="after")
    def _protected_has_sole_reviewer(self) -> "EndpointRecord":
        if self.protected and not self.reviewer:
            raise ValueError("protected endpoint requires exactly one reviewer")
        return self


class FunctionRecord(ProtocolModel):
    """A pre-registered executable payload; immutable once registered."""

    function_id: str
    owner: str
    payload_kind: PayloadKind
    payload: str
    registered_at: int

    @field_validator("payload")
    @classmethod
    def _payload_nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("payload must be non-empty")
        return v


class RepoRef(ProtocolModel):
    url: str
    ref: str


class TaskSpec(ProtocolModel):
    """A unit of remote CI work: what to run, where, and for whom."""

    endpoint_id: str
    kind: TaskKind
    shell_cmd: Optional[str] = None
    function_id: Optional[str] = None
    args: tuple[str, ...] = ()
    env: dict[str, str] = Field(default_factory=dict)
    repo: Optional[RepoRef] = None
    timeout_seconds: int = Field(gt=0)
    requested_by: str

    @model_validator(mode="after")
    def _payload_matches_kind(self) -> "TaskSpec":
        if self.kind is TaskKind.SHELL:
            if not self.shell_cmd or self.function_id is not None:
                raise ValueError("kind=shell requires shell_cmd and no function_id")
        else:
            if not self.function_id or self.shell_cmd is not None:
                raise ValueError("kind=function requires function_id and no shell_cmd")
        return self


class ProvenanceSnapshot(ProtocolModel):
    """Trace of the environment a task ran in, for later reproducibility review."""

    hostname: str
    os_description: str
    captured_env: dict[str, str]
    tool_versions: dict[str, str]
    captured_at: int

    @field_validator("captured_env")
    @classmethod
    def _no_secret_keys(cls, v: dict[str, str]) -> dict[str, str]:
        for key in v:
            if SECRET_ENV_PATTERN.search(key):
                raise ValueError(f"captured_env contains denied key: {key}")
        return v


class TaskResult(ProtocolModel):
    exit_code: int
    stdout: str
    stdout_truncated: bool = False
    stderr: str
    stderr_truncated: bool = False
    duration_seconds: float = Field(ge=0)
    provenance: Optional[ProvenanceSnapshot] = None


class Transition(ProtocolModel):
    from_state: RunState
    to_state: RunState
    at: int
    actor: str


class TaskRun(ProtocolModel):
    """A task and its full lifecycle: spec, current state, transition history."""

    run_id: str
    spec: TaskSpec
    state: RunState
    transitions: tuple[Transition, ...] = ()
    result: Optional[TaskResult] = None
    claimed_by: Optional[str] = None

    @model_validator(mode="after")
    def _lifecycle_sound(self) -> "TaskRun":
        prev = INITIAL_STATE
        for t in self.transitions:
            if t.from_state is not prev:
                raise ValueError(
                    f"transition chain broken: expected from_state={prev.value}, got {t.from_state.value}"
                )
            if not validate_transition(t.from_state, t.to_state):
                raise ValueError(f"illegal transition {t.from_state.value} -> {t.to_state.value}")
            prev = t.to_state
        if prev is not self.state:
            raise ValueError(f"state {self.state.value} does not match transition chain end {prev.value}")
        terminal_with_result = self.state in (RunState.COMPLETED, RunState.FAILED)
        if terminal_with_result != (self.result is not None):
            raise ValueError("result must be present iff state is completed or failed")
        return self

    def is_terminal(self) -> bool:
        return is_terminal(self.state)


class ArtifactFile(ProtocolModel):
    relative_path: str
    byte_size: int = Field(ge=0)
    digest: str


class ArtifactBundle(ProtocolModel):
    """Retained output files of a run; content is purged after retention_days
    but the metadata (paths, sizes, digests) is kept forever."""

    artifact_id: str
    run_id: str
    files: tuple[ArtifactFile, ...] = ()
    created_at: int
    retention_days: int = Field(default=90, gt=0)
    purged: bool = False


class AuditEvent(ProtocolModel):
    """One security-relevant action; the log is append-only with dense seq."""

    seq: int = Field(ge=1)
    timestamp: int
    actor: str
    action: AuditAction
    subject: str
    details: dict[str, object] = Field(default_factory=dict)
