"""HTTP surface of the broker.

Thin translation layer: parse/authenticate, call the core, dump models back
out. Users authenticate with `Authorization: Bearer <token>`, agents with
`Authorization: Agent <key>`. Errors are `{"error_code": ..., "message": ...}`
with a matching HTTP status.
"""

from __future__ import annotations

import asyncio
import base64
import contextlib
import threading
import time
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from ..protocol import (
    AuditAction,
    EndpointMode,
    PayloadKind,
    RepoRef,
    RunState,
    TaskKind,
    TaskResult,
)
from . import errors
from .core import Broker


class RequestModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TokenRequest(RequestModel):
    client_id: str
    client_secret: str


class TemplateIn(RequestModel):
    provider_kind: str
    pilot_size: int = Field(default=1, ge=1)
    batch_directives: dict[str, str] = Field(default_factory=dict)
    workspace_root: str
    identity_map_ref: str = ""


class EndpointCreate(RequestModel):
    display_name: str
    mode: EndpointMode
    protected: bool = False
    reviewer: Optional[str] = None
    allow_list: list[str] = Field(default_factory=list)
    template: Optional[TemplateIn] = None


class FunctionCreate(RequestModel):
    payload_kind: PayloadKind
    payload: str


class TaskCreate(RequestModel):
    endpoint_id: str
    kind: TaskKind
    shell_cmd: Optional[str] = None
    function_id: Optional[str] = None
    args: list[str] = Field(default_factory=list)
    env: dict[str, str] = Field(default_factory=dict)
    repo: Optional[RepoRef] = None
    timeout_seconds: int


class PollRequest(RequestModel):
    max_tasks: int = Field(default=1, ge=1, le=64)
    wait_seconds: float = Field(default=0.0, ge=0.0)


class StateReport(RequestModel):
    state: RunState


class FileUpload(RequestModel):
    relative_path: str
    content_b64: str


class ResultReport(RequestModel):
    terminal_state: RunState
    result: TaskResult
    files: list[FileUpload] = Field(default_factory=list)


def _credential(request: Request, scheme: str) -> str:
    header = request.headers.get("authorization", "")
    got_scheme, _, value = header.partition(" ")
    if got_scheme != scheme:
        return ""
    return value.strip()


def create_app(broker: Broker, *, sweep_interval_seconds: float = 30.0) -> FastAPI:
    stop = threading.Event()

    def sweeper() -> None:
        while not stop.wait(sweep_interval_seconds):
            with contextlib.suppress(Exception):
                broker.sweep_expiry()
                broker.sweep_retention()
                broker.snapshot()

    @contextlib.asynccontextmanager
    async def lifespan(_app: FastAPI):
        thread = threading.Thread(target=sweeper, name="broker-sweeper", daemon=True)
        thread.start()
        try:
            yield
        finally:
            stop.set()
            thread.join(timeout=5)
            broker.close()

    app = FastAPI(title="federated CI broker", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.state.broker = broker

    # The dashboard is served from a different origin.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(errors.BrokerError)
    async def broker_error(_req: Request, exc: errors.BrokerError) -> JSONResponse:
        return JSONResponse(
            status_code=exc.http_status,
            content={"error_code": exc.code, "message": exc.message},
        )

    @app.exception_handler(RequestValidationError)
    async def invalid_request(_req: Request, exc: RequestValidationError) -> JSONResponse:
        first = exc.errors()[0]
        loc = ".".join(str(part) for part in first["loc"])
        return JSONResponse(
            status_code=400,
            content={"error_code": "invalid_request", "message": f"{loc}: {first['msg']}"},
        )

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"ok": True}

    # -- user surface -----------------------------------------------------

    @app.post("/v1/token")
    async def token(body: TokenRequest) -> dict:
        issued = broker.issue_token(body.client_id, body.client_secret)
        return issued.model_dump(mode="json")

    @app.post("/v1/endpoints")
    async def create_endpoint(body: EndpointCreate, request: Request) -> dict:
        record, agent_key = broker.register_endpoint(
            _credential(request, "Bearer"),
            display_name=body.display_name,
            mode=body.mode,
            protected=body.protected,
            reviewer=body.reviewer,
            allow_list=tuple(body.allow_list),
            template=body.template.model_dump() if body.template else None,
        )
        return {"endpoint": record.model_dump(mode="json"), "agent_key": agent_key}

    @app.get("/v1/endpoints")
    async def list_endpoints(request: Request) -> dict:
        records = broker.list_endpoints(_credential(request, "Bearer"))
        return {"endpoints": [r.model_dump(mode="json") for r in records]}

    @app.post("/v1/functions")
    async def create_function(body: FunctionCreate, request: Request) -> dict:
        record = broker.register_function(
            _credential(request, "Bearer"),
            payload_kind=body.payload_kind,
            payload=body.payload,
        )
        return record.model_dump(mode="json")

    @app.get("/v1/functions")
    async def list_functions(request: Request) -> dict:
        records = broker.list_functions(_credential(request, "Bearer"))
        return {"functions": [r.model_dump(mode="json") for r in records]}

    @app.post("/v1/tasks")
    async def submit_task(body: TaskCreate, request: Request) -> dict:
        run = broker.submit_task(_credential(request, "Bearer"), body.model_dump())
        return run.model_dump(mode="json")

    @app.get("/v1/runs")
    async def list_runs(
        request: Request,
        state: Optional[RunState] = None,
        endpoint_id: Optional[str] = None,
    ) -> dict:
        runs = broker.list_runs(
            _credential(request, "Bearer"), state=state, endpoint_id=endpoint_id
        )
        return {"runs": [r.model_dump(mode="json") for r in runs]}

    @app.get("/v1/runs/{run_id}")
    async def get_run(run_id: str, request: Request) -> dict:
        return broker.get_run(_credential(request, "Bearer"), run_id).model_dump(mode="json")

    @app.post("/v1/runs/{run_id}/approve")
    async def approve(run_id: str, request: Request) -> dict:
        return broker.approve(_credential(request, "Bearer"), run_id).model_dump(mode="json")

    @app.post("/v1/runs/{run_id}/reject")
    async def reject(run_id: str, request: Request) -> dict:
        return broker.reject(_credential(request, "Bearer"), run_id).model_dump(mode="json")

    @app.get("/v1/runs/{run_id}/result")
    async def get_result(run_id: str, request: Request) -> dict:
        return broker.get_result(_credential(request, "Bearer"), run_id).model_dump(mode="json")

    @app.get("/v1/runs/{run_id}/artifacts")
    async def run_artifacts(run_id: str, request: Request) -> dict:
        bundles = broker.run_artifacts(_credential(request, "Bearer"), run_id)
        return {"artifacts": [b.model_dump(mode="json") for b in bundles]}

    @app.get("/v1/artifacts/{artifact_id}")
    async def get_artifact(artifact_id: str, request: Request) -> dict:
        bundle, contents = broker.get_artifact(_credential(request, "Bearer"), artifact_id)
        files = None
        if contents is not None:
            files = {
                path: base64.b64encode(data).decode("ascii") for path, data in contents.items()
            }
        return {"bundle": bundle.model_dump(mode="json"), "files": files}

    @app.get("/v1/audit")
    async def audit(
        request: Request,
        subject: Optional[str] = None,
        action: Optional[AuditAction] = None,
        seq_from: Optional[int] = None,
        seq_to: Optional[int] = None,
    ) -> dict:
        events = broker.query_audit(
            _credential(request, "Bearer"),
            subject=subject,
            action=action,
            seq_from=seq_from,
            seq_to=seq_to,
        )
        return {"events": [e.model_dump(mode="json") for e in events]}

    # -- agent surface ------------------------------------------------------

    @app.post("/v1/agent/{endpoint_id}/poll")
    async def agent_poll(endpoint_id: str, body: PollRequest, request: Request) -> dict:
        key = _credential(request, "Agent")
        wait = min(body.wait_seconds, broker.config.long_poll_cap_seconds)
        deadline = time.monotonic() + wait
        while True:
            grant = broker.agent_poll(endpoint_id, key, max_tasks=body.max_tasks)
            if grant.assignments or time.monotonic() >= deadline:
                return {
                    "assignments": [
                        {
                            "run_id": a.run_id,
                            "spec": a.spec.model_dump(mode="json"),
                            "payload": a.payload,
                        }
                        for a in grant.assignments
                    ],
                    "allow_list": list(grant.allow_list),
                }
            await asyncio.sleep(0.1)

    @app.post("/v1/agent/{endpoint_id}/runs/{run_id}/state")
    async def agent_report_state(
        endpoint_id: str, run_id: str, body: StateReport, request: Request
    ) -> dict:
        run = broker.report_state(
            endpoint_id, _credential(request, "Agent"), run_id, body.state
        )
        return run.model_dump(mode="json")

    @app.post("/v1/agent/{endpoint_id}/runs/{run_id}/result")
    async def agent_report_result(
        endpoint_id: str, run_id: str, body: ResultReport, request: Request
    ) -> dict:
        files = []
        for item in body.files:
            try:
                files.append((item.relative_path, base64.b64decode(item.content_b64, validate=True)))
            except (ValueError, TypeError) as exc:
                raise errors.invalid_result(
                    f"bad base64 content for {item.relative_path!r}"
                ) from exc
        run, bundle = broker.report_result(
            endpoint_id,
            _credential(request, "Agent"),
            run_id,
            terminal_state=body.terminal_state,
            result=body.result,
            files=files,
        )
        return {"run": run.model_dump(mode="json"), "artifact_id": bundle.artifact_id}

    return app
