"""Canonical wire codec: UTF-8 JSON, fixed field names, no unknown fields.

Encoding is deterministic (declaration-ordered fields, canonical allow-list
ordering), so re-encoding a decoded message is byte-identical. The audit log
on disk is JSON-lines, one encoded AuditEvent per line.
"""

from __future__ import annotations

from typing import Type, TypeVar, Union

from pydantic import ValidationError

from .types import (
    ArtifactBundle,
    AuditEvent,
    BearerToken,
    Credential,
    EndpointRecord,
    EndpointTemplate,
    FunctionRecord,
    ProtocolModel,
    ProvenanceSnapshot,
    TaskResult,
    TaskRun,
    TaskSpec,
)

ProtocolMessage = Union[
    Credential,
    BearerToken,
    EndpointRecord,
    EndpointTemplate,
    FunctionRecord,
    TaskSpec,
    TaskRun,
    TaskResult,
    ProvenanceSnapshot,
    ArtifactBundle,
    AuditEvent,
]

M = TypeVar("M", bound=ProtocolModel)


class SchemaError(ValueError):
    """Raised when a message cannot be decoded; names the offending field."""

    def __init__(self, type_name: str, field: str, reason: str):
        self.type_name = type_name
        self.field = field
        self.reason = reason
        super().__init__(f"{type_name}.{field}: {reason}")


def encode_message(msg: ProtocolModel) -> bytes:
    return msg.model_dump_json().encode("utf-8")


def decode_message(raw: bytes | str, model: Type[M]) -> M:
    try:
        return model.model_validate_json(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise SchemaError(model.__name__, field, first["msg"]) from exc
