"""Coordination broker: durable state, operations, HTTP API."""

from .core import Broker, BrokerConfig, PollGrant, TaskAssignment
from .errors import BrokerError
from .store import BrokerStore, StoreState, apply_event, reduce_events

__all__ = [
    "Broker",
    "BrokerConfig",
    "BrokerError",
    "BrokerStore",
    "PollGrant",
    "StoreState",
    "TaskAssignment",
    "apply_event",
    "reduce_events",
]
