"""CI step adapter: a thin command line client that submits tasks to the
coordination broker, waits for results, and publishes artifacts."""

from .client import ApiError, AuthError, BrokerUnreachable, UserClient
from .durations import parse_test_durations
from .step import (
    DigestMismatch,
    SiteOutcome,
    StepInputs,
    publish_artifacts,
    run_matrix,
    run_step,
)

__all__ = [
    "ApiError",
    "AuthError",
    "BrokerUnreachable",
    "DigestMismatch",
    "SiteOutcome",
    "StepInputs",
    "UserClient",
    "parse_test_durations",
    "publish_artifacts",
    "run_matrix",
    "run_step",
]
