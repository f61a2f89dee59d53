"""Agent configuration: a YAML file plus an identity map file.

The agent key is never part of the config file itself; it comes from the
AGENT_KEY environment variable or a separate key file referenced by path.

    broker_url: http://127.0.0.1:8765
    endpoint_id: <uuid>
    agent_key_file: agent.key
    poll_interval_seconds: 2
    identity_map_file: identities.map
    template:
      provider_kind: local | batch
      pilot_size: 2
      workspace_root: /var/lib/agent/work
      batch_directives: {partition: debug}   # batch only
      batch_commands:                         # batch only
        submit: "sbatch {script}"
        status: "... {job_id}"
        cancel: "... {job_id}"

Identity map file: one "platform_identity local_account" pair per line,
'#' starts a comment.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Optional

import yaml

from ..providers.batch import BatchCommands


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TemplateConfig:
    provider_kind: str
    workspace_root: Path
    pilot_size: int = 1
    batch_directives: dict[str, str] = dataclasses.field(default_factory=dict)
    batch_commands: Optional[BatchCommands] = None


@dataclasses.dataclass(frozen=True)
class AgentConfig:
    broker_url: str
    endpoint_id: str
    agent_key: str
    template: TemplateConfig
    identity_map: dict[str, str]
    poll_interval_seconds: float = 2.0


def load_identity_map(path: Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read identity map {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ConfigError(
                f"{path}:{lineno}: expected 'platform_identity local_account', got {raw!r}"
            )
        identity, account = tokens
        if identity in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate identity {identity!r}")
        mapping[identity] = account
    return mapping


def load_config(path: Path | str) -> AgentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text("utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")

    def require(key: str):
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
        return raw[key]

    base = path.parent

    agent_key = os.environ.get("AGENT_KEY", "").strip()
    if not agent_key:
        key_file = raw.get("agent_key_file")
        if not key_file:
            raise ConfigError(f"{path}: agent_key_file required (or set AGENT_KEY)")
        try:
            agent_key = (base / key_file).read_text("utf-8").strip()
        except OSError as exc:
            raise ConfigError(f"cannot read agent key file: {exc}") from exc
        if not agent_key:
            raise ConfigError(f"{path}: agent key file is empty")

    template_raw = require("template")
    if not isinstance(template_raw, dict):
        raise ConfigError(f"{path}: template must be a mapping")
    provider_kind = template_raw.get("provider_kind")
    if provider_kind not in ("local", "batch"):
        raise ConfigError(f"{path}: template.provider_kind must be 'local' or 'batch'")
    if "workspace_root" not in template_raw:
        raise ConfigError(f"{path}: template.workspace_root is required")
    pilot_size = int(template_raw.get("pilot_size", 1))
    if pilot_size < 1:
        raise ConfigError(f"{path}: template.pilot_size must be at least 1")

    batch_commands = None
    if provider_kind == "batch":
        commands_raw = template_raw.get("batch_commands")
        if not isinstance(commands_raw, dict):
            raise ConfigError(f"{path}: template.batch_commands required for batch provider")
        try:
            batch_commands = BatchCommands(
                submit=commands_raw["submit"],
                status=commands_raw["status"],
                cancel=commands_raw["cancel"],
                job_id_pattern=commands_raw.get("job_id_pattern"),
            )
            batch_commands.validate()
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: bad batch_commands: {exc}") from exc

    directives = template_raw.get("batch_directives", {}) or {}
    if not isinstance(directives, dict):
        raise ConfigError(f"{path}: template.batch_directives must be a mapping")

    workspace_root = Path(template_raw["workspace_root"])
    if not workspace_root.is_absolute():
        workspace_root = base / workspace_root

    template = TemplateConfig(
        provider_kind=provider_kind,
        workspace_root=workspace_root,
        pilot_size=pilot_size,
        batch_directives={str(k): str(v) for k, v in directives.items()},
        batch_commands=batch_commands,
    )

    identity_map = load_identity_map(base / str(require("identity_map_file")))

    return AgentConfig(
        broker_url=str(require("broker_url")).rstrip("/"),
        endpoint_id=str(require("endpoint_id")),
        agent_key=agent_key,
        template=template,
        identity_map=identity_map,
        poll_interval_seconds=float(raw.get("poll_interval_seconds", 2.0)),
    )
