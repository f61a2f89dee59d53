"""HTTP surface: auth headers, wire shapes, error mapping, long poll."""

from __future__ import annotations

import base64

import pytest
from fastapi.testclient import TestClient

from fedci.broker import Broker
from fedci.broker.api import create_app


@pytest.fixture
def client(tmp_path):
    broker = Broker(tmp_path / "state")
    broker.add_credential("ci-bot", "hunter22", "alice")
    broker.add_credential("review-bot", "hunter23", "roberta")
    app = create_app(broker, sweep_interval_seconds=3600)
    with TestClient(app) as test_client:
        yield test_client


def get_token(client, client_id="ci-bot", secret="hunter22") -> str:
    resp = client.post("/v1/token", json={"client_id": client_id, "client_secret": secret})
    assert resp.status_code == 200, resp.text
    return resp.json()["token"]


def bearer(token: str) -> dict:
    return {"Authorization": f"Bearer {token}"}


def agent(key: str) -> dict:
    return {"Authorization": f"Agent {key}"}


def make_endpoint(client, token, **overrides):
    body = {"display_name": "site", "mode": "single_user"}
    body.update(overrides)
    resp = client.post("/v1/endpoints", json=body, headers=bearer(token))
    assert resp.status_code == 200, resp.text
    return resp.json()["endpoint"], resp.json()["agent_key"]


def submit_shell(client, token, endpoint_id, cmd="true"):
    resp = client.post(
        "/v1/tasks",
        json={
            "endpoint_id": endpoint_id,
            "kind": "shell",
            "shell_cmd": cmd,
            "timeout_seconds": 60,
        },
        headers=bearer(token),
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


def test_token_issue_and_bad_secret(client):
    token = get_token(client)
    assert len(token) == 64
    resp = client.post("/v1/token", json={"client_id": "ci-bot", "client_secret": "nope"})
    assert resp.status_code == 401
    assert resp.json()["error_code"] == "auth_failure"
    assert "message" in resp.json()


def test_missing_bearer_token_is_401(client):
    resp = client.get("/v1/endpoints")
    assert resp.status_code == 401
    assert resp.json()["error_code"] == "invalid_token"


def test_unknown_field_rejected(client):
    token = get_token(client)
    record, _ = make_endpoint(client, token)
    resp = client.post(
        "/v1/tasks",
        json={
            "endpoint_id": record["endpoint_id"],
            "kind": "shell",
            "shell_cmd": "true",
            "timeout_seconds": 60,
            "branch": "main",
        },
        headers=bearer(token),
    )
    assert resp.status_code == 400
    body = resp.json()
    assert body["error_code"] == "invalid_request"
    assert "branch" in body["message"]


def test_full_flow_over_http(client):
    token = get_token(client)
    record, agent_key = make_endpoint(client, token)
    endpoint_id = record["endpoint_id"]
    run = submit_shell(client, token, endpoint_id, "pytest -q")
    assert run["state"] == "queued"
    run_id = run["run_id"]

    resp = client.post(
        f"/v1/agent/{endpoint_id}/poll",
        json={"max_tasks": 1, "wait_seconds": 0},
        headers=agent(agent_key),
    )
    assert resp.status_code == 200
    grant = resp.json()
    assert grant["assignments"][0]["run_id"] == run_id
    assert grant["assignments"][0]["spec"]["shell_cmd"] == "pytest -q"

    for state in ("staging", "running"):
        resp = client.post(
            f"/v1/agent/{endpoint_id}/runs/{run_id}/state",
            json={"state": state},
            headers=agent(agent_key),
        )
        assert resp.status_code == 200, resp.text
        assert resp.json()["state"] == state

    resp = client.post(
        f"/v1/agent/{endpoint_id}/runs/{run_id}/result",
        json={
            "terminal_state": "completed",
            "result": {
                "exit_code": 0,
                "stdout": "5 passed",
                "stderr": "",
                "duration_seconds": 1.5,
            },
            "files": [
                {
                    "relative_path": "stdout.txt",
                    "content_b64": base64.b64encode(b"5 passed").decode(),
                }
            ],
        },
        headers=agent(agent_key),
    )
    assert resp.status_code == 200, resp.text
    artifact_id = resp.json()["artifact_id"]
    assert resp.json()["run"]["state"] == "completed"

    resp = client.get(f"/v1/runs/{run_id}", headers=bearer(token))
    assert resp.json()["state"] == "completed"

    resp = client.get(f"/v1/runs/{run_id}/result", headers=bearer(token))
    assert resp.status_code == 200
    assert resp.json()["exit_code"] == 0
    assert resp.json()["stdout"] == "5 passed"

    resp = client.get(f"/v1/runs/{run_id}/artifacts", headers=bearer(token))
    assert [b["artifact_id"] for b in resp.json()["artifacts"]] == [artifact_id]

    resp = client.get(f"/v1/artifacts/{artifact_id}", headers=bearer(token))
    assert resp.status_code == 200
    files = resp.json()["files"]
    assert base64.b64decode(files["stdout.txt"]) == b"5 passed"

    resp = client.get("/v1/audit", params={"subject": run_id}, headers=bearer(token))
    actions = [e["action"] for e in resp.json()["events"]]
    assert actions[0] == "task_submitted"
    assert "result_reported" in actions


def test_approval_flow_over_http(client):
    token = get_token(client)
    reviewer_token = get_token(client, "review-bot", "hunter23")
    record, _ = make_endpoint(client, token, protected=True, reviewer="roberta")
    run = submit_shell(client, token, record["endpoint_id"])
    assert run["state"] == "pending_approval"

    resp = client.post(f"/v1/runs/{run['run_id']}/approve", headers=bearer(token))
    assert resp.status_code == 403
    assert resp.json()["error_code"] == "not_reviewer"

    resp = client.post(f"/v1/runs/{run['run_id']}/approve", headers=bearer(reviewer_token))
    assert resp.status_code == 200
    assert resp.json()["state"] == "queued"

    resp = client.post(f"/v1/runs/{run['run_id']}/reject", headers=bearer(reviewer_token))
    assert resp.status_code == 409
    assert resp.json()["error_code"] == "wrong_state"


def test_function_listing_round_trip(client):
    token = get_token(client)
    resp = client.post(
        "/v1/functions",
        json={"payload_kind": "shell_script", "payload": "#!/bin/sh\npytest -q\n"},
        headers=bearer(token),
    )
    assert resp.status_code == 200, resp.text
    function_id = resp.json()["function_id"]

    resp = client.get("/v1/functions", headers=bearer(token))
    assert resp.status_code == 200
    listed = {f["function_id"]: f for f in resp.json()["functions"]}
    assert listed[function_id]["payload"] == "#!/bin/sh\npytest -q\n"
    assert listed[function_id]["owner"] == "alice"

    assert client.get("/v1/functions").status_code == 401


def test_agent_poll_wrong_key(client):
    token = get_token(client)
    record, _ = make_endpoint(client, token)
    resp = client.post(
        f"/v1/agent/{record['endpoint_id']}/poll",
        json={"max_tasks": 1, "wait_seconds": 0},
        headers=agent("wrong"),
    )
    assert resp.status_code == 401
    assert resp.json()["error_code"] == "invalid_agent_key"


def test_unknown_run_and_artifact_are_404(client):
    token = get_token(client)
    assert client.get("/v1/runs/ghost", headers=bearer(token)).status_code == 404
    assert client.get("/v1/artifacts/ghost", headers=bearer(token)).status_code == 404


def test_result_before_terminal_is_409(client):
    token = get_token(client)
    record, _ = make_endpoint(client, token)
    run = submit_shell(client, token, record["endpoint_id"])
    resp = client.get(f"/v1/runs/{run['run_id']}/result", headers=bearer(token))
    assert resp.status_code == 409
    assert resp.json()["error_code"] == "not_terminal"


def test_long_poll_returns_queued_task_immediately(client):
    token = get_token(client)
    record, agent_key = make_endpoint(client, token)
    run = submit_shell(client, token, record["endpoint_id"])
    resp = client.post(
        f"/v1/agent/{record['endpoint_id']}/poll",
        json={"max_tasks": 4, "wait_seconds": 20},
        headers=agent(agent_key),
    )
    assert [a["run_id"] for a in resp.json()["assignments"]] == [run["run_id"]]


def test_list_runs_filters(client):
    token = get_token(client)
    record, _ = make_endpoint(client, token)
    other, _ = make_endpoint(client, token, display_name="other")
    submit_shell(client, token, record["endpoint_id"])
    submit_shell(client, token, other["endpoint_id"])
    resp = client.get(
        "/v1/runs",
        params={"endpoint_id": record["endpoint_id"], "state": "queued"},
        headers=bearer(token),
    )
    runs = resp.json()["runs"]
    assert len(runs) == 1
    assert runs[0]["spec"]["endpoint_id"] == record["endpoint_id"]


def test_cors_headers_for_browser_clients(client):
    resp = client.get("/healthz", headers={"Origin": "http://localhost:5173"})
    assert resp.headers.get("access-control-allow-origin") == "*"


def test_endpoint_listing_shows_liveness(client):
    token = get_token(client)
    record, agent_key = make_endpoint(client, token)
    resp = client.get("/v1/endpoints", headers=bearer(token))
    assert resp.json()["endpoints"][0]["status"] == "offline"
    client.post(
        f"/v1/agent/{record['endpoint_id']}/poll",
        json={"max_tasks": 1, "wait_seconds": 0},
        headers=agent(agent_key),
    )
    resp = client.get("/v1/endpoints", headers=bearer(token))
    listed = resp.json()["endpoints"][0]
    assert listed["status"] == "online"
    assert listed["last_heartbeat"] > 0
