"""Endpoint-side agent: outbound-only polling, identity mapping, per-user
execution contexts, task execution with staging and provenance."""

from .client import AgentAuthError, AgentClient, Assignment, BrokerRejection, BrokerUnavailable
from .config import AgentConfig, ConfigError, load_config, load_identity_map
from .daemon import AgentDaemon
from .execution import ExecutionOutcome, StagingError, run_task, stage_repo

__all__ = [
    "AgentAuthError",
    "AgentClient",
    "AgentConfig",
    "AgentDaemon",
    "Assignment",
    "BrokerRejection",
    "BrokerUnavailable",
    "ConfigError",
    "ExecutionOutcome",
    "StagingError",
    "load_config",
    "load_identity_map",
    "run_task",
    "stage_repo",
]
