"""Agent-side broker client. All traffic is outbound HTTP from here; the
agent never accepts a connection."""

from __future__ import annotations

import base64
import dataclasses
from typing import Optional

import requests

from ..protocol import RunState, TaskResult, TaskSpec


class BrokerUnavailable(RuntimeError):
    """Connection problems or server-side failures; retry later."""


class AgentAuthError(RuntimeError):
    """Key rejected; retrying is pointless."""


class BrokerRejection(RuntimeError):
    """The broker understood and said no."""

    def __init__(self, code: str, message: str, status: int):
        self.code = code
        self.message = message
        self.status = status
        super().__init__(f"{code}: {message}")


@dataclasses.dataclass(frozen=True)
class Assignment:
    run_id: str
    spec: TaskSpec
    payload: Optional[str]


class AgentClient:
    def __init__(
        self,
        broker_url: str,
        endpoint_id: str,
        agent_key: str,
        *,
        http_timeout: float = 35.0,
        session: Optional[requests.Session] = None,
    ):
        self.broker_url = broker_url.rstrip("/")
        self.endpoint_id = endpoint_id
        self._headers = {"Authorization": f"Agent {agent_key}"}
        self._timeout = http_timeout
        self._session = session or requests.Session()

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.broker_url}{path}"
        try:
            response = self._session.post(
                url, json=body, headers=self._headers, timeout=self._timeout
            )
        except requests.RequestException as exc:
            raise BrokerUnavailable(f"{url}: {exc}") from exc
        if response.status_code >= 500:
            raise BrokerUnavailable(f"{url}: HTTP {response.status_code}")
        if response.status_code >= 400:
            try:
                payload = response.json()
            except ValueError:
                payload = {}
            code = payload.get("error_code", "http_error")
            message = payload.get("message", response.text[:200])
            if code in ("invalid_agent_key", "unknown_endpoint"):
                raise AgentAuthError(f"{code}: {message}")
            raise BrokerRejection(code, message, response.status_code)
        return response.json()

    def poll(
        self, *, max_tasks: int = 1, wait_seconds: float = 0.0
    ) -> tuple[list[Assignment], tuple[str, ...]]:
        data = self._post(
            f"/v1/agent/{self.endpoint_id}/poll",
            {"max_tasks": max_tasks, "wait_seconds": wait_seconds},
        )
        assignments = [
            Assignment(
                run_id=item["run_id"],
                spec=TaskSpec.model_validate(item["spec"]),
                payload=item.get("payload"),
            )
            for item in data["assignments"]
        ]
        return assignments, tuple(data["allow_list"])

    def report_state(self, run_id: str, state: RunState) -> None:
        self._post(
            f"/v1/agent/{self.endpoint_id}/runs/{run_id}/state",
            {"state": state.value},
        )

    def report_result(
        self,
        run_id: str,
        *,
        terminal_state: RunState,
        result: TaskResult,
        files: list[tuple[str, bytes]],
    ) -> str:
        body = {
            "terminal_state": terminal_state.value,
            "result": result.model_dump(mode="json"),
            "files": [
                {
                    "relative_path": rel,
                    "content_b64": base64.b64encode(content).decode("ascii"),
                }
                for rel, content in files
            ],
        }
        data = self._post(f"/v1/agent/{self.endpoint_id}/runs/{run_id}/result", body)
        return data["artifact_id"]
