"""Shared domain types, lifecycle state machine, and wire codec."""

from .policy import allow_list_permits
from .states import (
    INITIAL_STATE,
    LEGAL_EDGES,
    TERMINAL_STATES,
    RunState,
    is_terminal,
    shortest_path,
    validate_transition,
)
from .types import (
    MAX_STREAM_BYTES,
    SECRET_ENV_PATTERN,
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
    ProtocolModel,
    ProviderKind,
    ProvenanceSnapshot,
    RepoRef,
    TaskKind,
    TaskResult,
    TaskRun,
    TaskSpec,
    Transition,
    filter_captured_env,
    new_id,
    now_ms,
    truncate_stream,
)
from .wire import ProtocolMessage, SchemaError, decode_message, encode_message

__all__ = [
    "INITIAL_STATE",
    "LEGAL_EDGES",
    "MAX_STREAM_BYTES",
    "SECRET_ENV_PATTERN",
    "TERMINAL_STATES",
    "ArtifactBundle",
    "ArtifactFile",
    "AuditAction",
    "AuditEvent",
    "BearerToken",
    "Credential",
    "EndpointMode",
    "EndpointRecord",
    "EndpointStatus",
    "EndpointTemplate",
    "FunctionRecord",
    "PayloadKind",
    "ProtocolMessage",
    "ProtocolModel",
    "ProviderKind",
    "ProvenanceSnapshot",
    "RepoRef",
    "RunState",
    "SchemaError",
    "TaskKind",
    "TaskResult",
    "TaskRun",
    "TaskSpec",
    "Transition",
    "allow_list_permits",
    "decode_message",
    "encode_message",
    "filter_captured_env",
    "is_terminal",
    "new_id",
    "now_ms",
    "shortest_path",
    "truncate_stream",
    "validate_transition",
]
