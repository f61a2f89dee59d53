"""Broker error taxonomy, mapped onto HTTP statuses by the API layer."""

from __future__ import annotations


class BrokerError(Exception):
    def __init__(self, code: str, message: str, http_status: int):
        self.code = code
        self.message = message
        self.http_status = http_status
        super().__init__(f"{code}: {message}")


def auth_failure() -> BrokerError:
    # Identical wording for unknown client id and wrong secret.
    return BrokerError("auth_failure", "invalid client credentials", 401)


def invalid_token() -> BrokerError:
    return BrokerError("invalid_token", "missing, unknown, or expired bearer token", 401)


def invalid_agent_key() -> BrokerError:
    return BrokerError("invalid_agent_key", "agent key does not match endpoint", 401)


def invalid_descriptor(msg: str) -> BrokerError:
    return BrokerError("invalid_descriptor", msg, 400)


def invalid_spec(msg: str) -> BrokerError:
    return BrokerError("invalid_spec", msg, 400)


def empty_payload() -> BrokerError:
    return BrokerError("empty_payload", "function payload must be non-empty", 400)


def unknown(kind: str, ident: str) -> BrokerError:
    return BrokerError(f"unknown_{kind}", f"no such {kind}: {ident}", 404)


def function_not_allowed(function_id: str | None) -> BrokerError:
    return BrokerError(
        "function_not_allowed",
        f"endpoint allow-list refuses this task (function_id={function_id or '<shell>'})",
        403,
    )


def not_reviewer() -> BrokerError:
    return BrokerError("not_reviewer", "only the endpoint's sole reviewer may decide this run", 403)


def not_claimant() -> BrokerError:
    return BrokerError("not_claimant", "run is not claimed by this endpoint", 403)


def wrong_state(msg: str) -> BrokerError:
    return BrokerError("wrong_state", msg, 409)


def not_terminal() -> BrokerError:
    return BrokerError("not_terminal", "run has no result yet", 409)


def invalid_result(msg: str) -> BrokerError:
    return BrokerError("invalid_result", msg, 400)
