"""HTTP client for the broker's user-facing API.

Deliberately thin: requests in, parsed JSON out. All request and response
validation is the broker's job; the client only maps transport and API
errors onto a small exception taxonomy the CLI can turn into exit codes.
"""

from __future__ import annotations

import base64
from typing import Any, Optional

import requests


class BrokerUnreachable(RuntimeError):
    """Connection failure or server-side breakage; retrying may help."""


class ApiError(RuntimeError):
    def __init__(self, code: str, message: str, status: int):
        self.code = code
        self.status = status
        super().__init__(f"{code}: {message}")


class AuthError(ApiError):
    """Credentials or token refused."""


def _raise_for(response: requests.Response) -> None:
    try:
        body = response.json()
        code = body["error_code"]
        message = body.get("message", "")
    except (ValueError, KeyError):
        code, message = "unexpected_error", response.text[:200]
    if code in ("auth_failure", "invalid_token"):
        raise AuthError(code, message, response.status_code)
    raise ApiError(code, message, response.status_code)


class UserClient:
    def __init__(
        self,
        broker_url: str,
        *,
        token: Optional[str] = None,
        http_timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ):
        self.broker_url = broker_url.rstrip("/")
        self.token = token
        self._timeout = http_timeout
        self._session = session or requests.Session()

    def _request(
        self,
        method: str,
        path: str,
        *,
        json_body: Optional[dict] = None,
        params: Optional[dict] = None,
        authenticated: bool = True,
    ) -> Any:
        headers = {}
        if authenticated:
            if not self.token:
                raise AuthError("invalid_token", "no token issued yet", 401)
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            response = self._session.request(
                method,
                f"{self.broker_url}{path}",
                json=json_body,
                params=params,
                headers=headers,
                timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise BrokerUnreachable(str(exc)) from exc
        if response.status_code >= 500:
            raise BrokerUnreachable(f"server error {response.status_code}")
        if response.status_code >= 400:
            _raise_for(response)
        return response.json()

    # ------------------------------------------------------------------

    def issue_token(self, client_id: str, client_secret: str) -> str:
        body = self._request(
            "POST",
            "/v1/token",
            json_body={"client_id": client_id, "client_secret": client_secret},
            authenticated=False,
        )
        self.token = body["token"]
        return self.token

    def register_endpoint(self, **fields) -> tuple[dict, str]:
        body = self._request("POST", "/v1/endpoints", json_body=fields)
        return body["endpoint"], body["agent_key"]

    def list_endpoints(self) -> list[dict]:
        return self._request("GET", "/v1/endpoints")["endpoints"]

    def register_function(self, **fields) -> dict:
        return self._request("POST", "/v1/functions", json_body=fields)

    def submit_task(self, **fields) -> dict:
        return self._request("POST", "/v1/tasks", json_body=fields)

    def get_run(self, run_id: str) -> dict:
        return self._request("GET", f"/v1/runs/{run_id}")

    def list_runs(self, *, state: Optional[str] = None, endpoint_id: Optional[str] = None) -> list[dict]:
        params = {}
        if state:
            params["state"] = state
        if endpoint_id:
            params["endpoint_id"] = endpoint_id
        return self._request("GET", "/v1/runs", params=params)["runs"]

    def approve(self, run_id: str) -> dict:
        return self._request("POST", f"/v1/runs/{run_id}/approve")

    def reject(self, run_id: str) -> dict:
        return self._request("POST", f"/v1/runs/{run_id}/reject")

    def get_result(self, run_id: str) -> dict:
        return self._request("GET", f"/v1/runs/{run_id}/result")

    def run_artifacts(self, run_id: str) -> list[dict]:
        return self._request("GET", f"/v1/runs/{run_id}/artifacts")["artifacts"]

    def get_artifact(self, artifact_id: str) -> tuple[dict, Optional[dict[str, bytes]]]:
        """Returns (bundle metadata, file contents). Contents is None once
        the bundle has been purged; the metadata survives."""
        body = self._request("GET", f"/v1/artifacts/{artifact_id}")
        encoded = body.get("files")
        contents = None
        if encoded is not None:
            contents = {path: base64.b64decode(data) for path, data in encoded.items()}
        return body["bundle"], contents

    def query_audit(self, **filters) -> list[dict]:
        params = {k: v for k, v in filters.items() if v is not None}
        return self._request("GET", "/v1/audit", params=params)["events"]
