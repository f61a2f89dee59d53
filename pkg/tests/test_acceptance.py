"""End-to-end acceptance scenarios over the full stack: broker and agents
as real subprocesses, the CI adapter driving them over HTTP, simulated
batch scheduling, retention, audit replay, and security gates.

Each test covers one numbered criterion; the terminal summary prints a
one-line verdict per criterion (see conftest.py).
"""

from __future__ import annotations

import json
import os
import random
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from io import StringIO
from pathlib import Path
from types import SimpleNamespace

import psutil
import pytest

from fedci.agent import AgentDaemon, Assignment
from fedci.agent.config import AgentConfig, TemplateConfig
from fedci.broker import Broker, reduce_events
from fedci.ciadapter import AuthError, StepInputs, UserClient, run_step
from fedci.protocol import (
    AuditEvent,
    EndpointMode,
    RunState,
    TaskKind,
    TaskResult,
    TaskSpec,
)
from fedci.providers import BatchCommands, BatchProvider, FileSimScheduler

from .harness import (
    PYTHON,
    AgentProc,
    BrokerProc,
    add_credential,
    free_port,
    make_failing_repo,
    make_passing_repo,
    sim_batch_commands,
    wait_until,
)

pytestmark = pytest.mark.slow

CI_SECRET = "hunter22-acceptance"
REVIEWER_SECRET = "hunter23-acceptance"
OTHER_SECRET = "hunter24-acceptance"

SUITE_TESTS = {
    "tests/test_suite.py::test_alpha",
    "tests/test_suite.py::test_beta",
    "tests/test_suite.py::test_gamma",
    "tests/test_suite.py::test_delta",
    "tests/test_suite.py::test_epsilon",
}


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    """Broker plus three live agents (one local, two batch over the
    simulated scheduler), with fixture repositories and client tokens."""
    base = tmp_path_factory.mktemp("stack")
    state_dir = base / "broker-state"
    add_credential(state_dir, "ci-bot", "alice", CI_SECRET)
    add_credential(state_dir, "review-bot", "roberta", REVIEWER_SECRET)
    add_credential(state_dir, "other-bot", "carol", OTHER_SECRET)

    broker = BrokerProc(state_dir, free_port(), base / "broker.log")
    broker.start()

    ci = UserClient(broker.url)
    ci.issue_token("ci-bot", CI_SECRET)
    reviewer = UserClient(broker.url)
    reviewer.issue_token("review-bot", REVIEWER_SECRET)
    other = UserClient(broker.url)
    other.issue_token("other-bot", OTHER_SECRET)

    listed_fn = ci.register_function(payload_kind="shell_script", payload="printf listed-ok")
    unlisted_fn = ci.register_function(payload_kind="shell_script", payload="printf not-listed")

    endpoints = {}
    agents = []
    identity_map = {"alice": "ci_alice"}

    cloud, cloud_key = ci.register_endpoint(display_name="cloud", mode="multi_user")
    endpoints["cloud"] = cloud
    agents.append(
        AgentProc(
            base / "agent-cloud",
            broker.url,
            cloud["endpoint_id"],
            cloud_key,
            identity_map,
            provider_kind="local",
            pilot_size=4,
        )
    )

    for label in ("hpc-a", "hpc-b"):
        record, key = ci.register_endpoint(display_name=label, mode="multi_user")
        endpoints[label] = record
        sched_dir = base / f"sched-{label}"
        FileSimScheduler.init(sched_dir, max_concurrent_jobs=4)
        agents.append(
            AgentProc(
                base / f"agent-{label}",
                broker.url,
                record["endpoint_id"],
                key,
                identity_map,
                provider_kind="batch",
                pilot_size=2,
                batch_commands=sim_batch_commands(sched_dir),
            )
        )

    secure, _secure_key = ci.register_endpoint(
        display_name="secure", mode="single_user", protected=True, reviewer="roberta"
    )
    endpoints["secure"] = secure
    restricted, _restricted_key = ci.register_endpoint(
        display_name="restricted",
        mode="single_user",
        allow_list=[listed_fn["function_id"]],
    )
    endpoints["restricted"] = restricted

    for agent in agents:
        agent.start()

    serving = {endpoints[label]["endpoint_id"] for label in ("cloud", "hpc-a", "hpc-b")}

    def all_online():
        status = {e["endpoint_id"]: e["status"] for e in ci.list_endpoints()}
        return all(status.get(eid) == "online" for eid in serving)

    try:
        wait_until(all_online, timeout=60, message="agents never came online")
    except TimeoutError:
        logs = "\n".join(f"--- {a.home}:\n{a.log_path.read_text()}" for a in agents)
        raise RuntimeError(f"agents offline; logs:\n{logs}")

    passing_repo = tmp_path_factory.mktemp("repos") / "passing"
    failing_repo = passing_repo.parent / "failing"
    make_passing_repo(passing_repo)
    make_failing_repo(failing_repo)

    yield SimpleNamespace(
        base=base,
        broker=broker,
        ci=ci,
        reviewer=reviewer,
        other=other,
        endpoints=endpoints,
        agents=agents,
        listed_fn=listed_fn,
        unlisted_fn=unlisted_fn,
        passing_repo=passing_repo,
        failing_repo=failing_repo,
    )

    for agent in agents:
        agent.stop()
    broker.stop()


def run_ci(args: list[str], *, timeout: float = 240.0) -> subprocess.CompletedProcess:
    env = dict(os.environ, CI_CLIENT_ID="ci-bot", CI_CLIENT_SECRET=CI_SECRET)
    return subprocess.run(
        [PYTHON, "-m", "fedci.ciadapter.cli", *args],
        capture_output=True,
        text=True,
        env=env,
        timeout=timeout,
    )


def describe(proc: subprocess.CompletedProcess) -> str:
    return f"exit={proc.returncode}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"


# ---------------------------------------------------------------------------


def test_criterion_1_multi_site_matrix(stack, tmp_path):
    matrix = tmp_path / "matrix.yaml"
    matrix.write_text(
        "".join(
            f"{label}: {stack.endpoints[label]['endpoint_id']}\n"
            for label in ("cloud", "hpc-a", "hpc-b")
        )
    )
    out_dir = tmp_path / "out"
    proc = run_ci(
        [
            "--matrix",
            str(matrix),
            "--shell",
            "python3 -m pytest tests -q --durations=0",
            "--repo-url",
            str(stack.passing_repo),
            "--repo-ref",
            "main",
            "--timeout",
            "180",
            "--artifact-dir",
            str(out_dir),
            "--broker",
            stack.broker.url,
            "--poll-interval",
            "0.1",
        ]
    )
    assert proc.returncode == 0, describe(proc)

    report = json.loads((out_dir / "report.json").read_text())
    assert len(report["sites"]) == 3
    name_sets = {}
    for site in report["sites"]:
        assert site["state"] == "completed", site
        assert site["exit_code"] == 0
        names = {t["name"] for t in site["tests"]}
        assert names == SUITE_TESTS, f"{site['label']}: {sorted(names)}"
        assert all(t["seconds"] > 0 for t in site["tests"]), site
        name_sets[site["label"]] = names
    assert len(set(map(frozenset, name_sets.values()))) == 1


def test_criterion_2_failure_reporting(stack, tmp_path):
    out_dir = tmp_path / "out"
    proc = run_ci(
        [
            "--endpoint",
            stack.endpoints["cloud"]["endpoint_id"],
            "--shell",
            "python3 -m pytest tests -q -s",
            "--repo-url",
            str(stack.failing_repo),
            "--repo-ref",
            "main",
            "--timeout",
            "120",
            "--artifact-dir",
            str(out_dir),
            "--broker",
            stack.broker.url,
            "--poll-interval",
            "0.1",
        ]
    )
    assert proc.returncode == 1, describe(proc)

    report = json.loads((out_dir / "report.json").read_text())
    (site,) = report["sites"]
    assert site["state"] == "failed"
    assert site["exit_code"] == 1

    run = stack.ci.get_run(site["run_id"])
    assert run["state"] == "failed"
    bundles = stack.ci.run_artifacts(site["run_id"])
    assert bundles, "terminal run must hold an artifact bundle"
    _bundle, contents = stack.ci.get_artifact(bundles[-1]["artifact_id"])
    assert contents["stdout.txt"], "full stdout retained"
    assert b"test_always_fails" in contents["stderr.txt"]


def test_criterion_3_security_gates(stack, tmp_path):
    # (a) wrong secret refused and audited
    with pytest.raises(AuthError) as excinfo:
        UserClient(stack.broker.url).issue_token("ci-bot", "not-the-secret")
    assert excinfo.value.code == "auth_failure"
    failures = stack.ci.query_audit(action="auth_failure", subject="ci-bot")
    assert failures, "failed login must appear in the audit log"

    # (b) protected endpoint gates on its sole reviewer
    secure_id = stack.endpoints["secure"]["endpoint_id"]
    run = stack.ci.submit_task(
        endpoint_id=secure_id, kind="shell", shell_cmd="true", timeout_seconds=60
    )
    assert run["state"] == "pending_approval"
    for wrong_party in (stack.ci, stack.other):  # submitter and bystander
        with pytest.raises(Exception) as approval_attempt:
            wrong_party.approve(run["run_id"])
        assert getattr(approval_attempt.value, "code", "") == "not_reviewer"
    assert stack.ci.get_run(run["run_id"])["state"] == "pending_approval"
    approved = stack.reviewer.approve(run["run_id"])
    assert approved["state"] == "queued"
    audit = stack.ci.query_audit(action="approval_granted", subject=run["run_id"])
    assert audit and audit[-1]["actor"] == "roberta"

    # (c) function outside a non-empty allow-list: refused at submit...
    restricted_id = stack.endpoints["restricted"]["endpoint_id"]
    with pytest.raises(Exception) as submit_attempt:
        stack.ci.submit_task(
            endpoint_id=restricted_id,
            kind="function",
            function_id=stack.unlisted_fn["function_id"],
            timeout_seconds=60,
        )
    assert getattr(submit_attempt.value, "code", "") == "function_not_allowed"

    # ...and refused again agent-side when injected past the broker.
    delivered = []

    class InjectingClient:
        def poll(self, *, max_tasks, wait_seconds):
            return [], ()

        def report_state(self, run_id, state):
            pass

        def report_result(self, run_id, terminal_state, result, *, files):
            delivered.append((run_id, terminal_state.value, result))
            return "artifact-x"

    marker = tmp_path / "must-not-run"
    daemon = AgentDaemon(
        AgentConfig(
            broker_url="http://unused.invalid",
            endpoint_id=restricted_id,
            agent_key="k",
            template=TemplateConfig(provider_kind="local", workspace_root=tmp_path / "wb"),
            identity_map={"alice": "ci_alice"},
        ),
        client=InjectingClient(),
    )
    try:
        smuggled = Assignment(
            run_id="r-injected",
            spec=TaskSpec(
                endpoint_id=restricted_id,
                kind=TaskKind.SHELL,
                shell_cmd=f'touch "{marker}"',
                timeout_seconds=60,
                requested_by="alice",
            ),
            payload=None,
        )
        daemon._dispatch(smuggled, (stack.listed_fn["function_id"],))
    finally:
        daemon.shutdown()
    assert delivered and delivered[0][1] == "failed"
    assert "allow_list_violation" in delivered[0][2].stderr
    assert not marker.exists()


def test_criterion_4_pilot_multiplexing(tmp_path):
    sched_dir = tmp_path / "sched"
    FileSimScheduler.init(sched_dir, max_concurrent_jobs=4)
    done = []
    lock = threading.Lock()

    def handler(item):
        with lock:
            done.append(item)

    provider = BatchProvider(
        BatchCommands(**sim_batch_commands(sched_dir)),
        pilot_size=2,
        script_dir=tmp_path / "pilots",
        handler=handler,
    )
    try:
        for i in range(20):
            provider.submit(i)
        wait_until(lambda: len(done) == 20, timeout=90, message="tasks never drained")
    finally:
        provider.shutdown(wait=True)
    assert sorted(done) == list(range(20))
    submissions = FileSimScheduler(sched_dir).submission_count()
    assert submissions <= 2, f"pilot jobs submitted: {submissions}"


def test_criterion_5_retention(tmp_path):
    class Clock:
        def __init__(self):
            self.ms = 1_755_000_000_000

        def now(self):
            return self.ms

        def advance(self, seconds):
            self.ms += int(seconds * 1000)

    clock = Clock()
    broker = Broker(tmp_path / "state", clock=clock.now)
    try:
        broker.add_credential("ci-bot", "pw", "alice")
        token = broker.issue_token("ci-bot", "pw").token
        record, key = broker.register_endpoint(
            token, display_name="site", mode=EndpointMode.SINGLE_USER
        )
        bundles = []
        for label in ("oldest", "middle", "newest"):
            # Tokens expire hourly; the clock jumps a day per iteration.
            token = broker.issue_token("ci-bot", "pw").token
            run = broker.submit_task(
                token,
                {
                    "endpoint_id": record.endpoint_id,
                    "kind": "shell",
                    "shell_cmd": "true",
                    "timeout_seconds": 60,
                },
            )
            broker.agent_poll(record.endpoint_id, key)
            _, bundle = broker.report_result(
                record.endpoint_id,
                key,
                run.run_id,
                terminal_state=RunState.COMPLETED,
                result=TaskResult(exit_code=0, stdout=label, stderr="", duration_seconds=0.1),
                files=[("stdout.txt", label.encode())],
            )
            bundles.append(bundle)
            clock.advance(86_400)
        clock.advance(88 * 86_400)  # ages now: 91, 90, 89 days

        purged = broker.sweep_retention()
        assert purged == [bundles[0].artifact_id], "only the 91-day bundle purges"

        token = broker.issue_token("ci-bot", "pw").token
        meta, contents = broker.get_artifact(token, bundles[0].artifact_id)
        assert meta.purged and contents is None
        assert meta.files and all(f.digest for f in meta.files), "metadata retained"
        for bundle in bundles[1:]:
            meta, contents = broker.get_artifact(token, bundle.artifact_id)
            assert not meta.purged and contents is not None

        assert broker.sweep_retention() == [], "second sweep purges nothing"
    finally:
        broker.close()


def test_criterion_6_outbound_only(stack):
    def listeners(pid: int) -> list:
        found = []
        try:
            procs = [psutil.Process(pid)]
            procs += procs[0].children(recursive=True)
        except psutil.NoSuchProcess:
            return found
        for proc in procs:
            try:
                query = getattr(proc, "net_connections", None) or proc.connections
                for conn in query(kind="inet"):
                    if conn.status == psutil.CONN_LISTEN:
                        found.append((proc.pid, conn.laddr))
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                continue
        return found

    # Instrument sanity: the broker must visibly hold its listening socket.
    assert listeners(stack.broker.proc.pid), "broker should be listening"
    for agent in stack.agents:
        assert agent.proc.poll() is None, "agent process died"
        held = listeners(agent.pid)
        assert held == [], f"agent {agent.home.name} holds listeners: {held}"


def test_criterion_7_audit_replay(stack, tmp_path):
    before = {
        run["run_id"]: run["state"]
        for run in stack.ci.list_runs()
        if run["state"] in ("completed", "failed", "rejected", "expired")
    }
    assert before, "earlier scenarios should have produced terminal runs"

    stack.broker.kill_hard()
    stack.broker.start()

    for run_id, state in before.items():
        assert stack.ci.get_run(run_id)["state"] == state

    # The stack keeps working after the crash: agents reconnect and serve.
    inputs = StepInputs(
        sites={"default": stack.endpoints["cloud"]["endpoint_id"]},
        shell_cmd="printf post-restart",
        timeout_seconds=60,
        poll_interval_seconds=0.05,
    )
    out, err = StringIO(), StringIO()
    client = UserClient(stack.broker.url, token=stack.ci.token)
    assert run_step(inputs, client, out=out, err=err) == 0, err.getvalue()
    assert out.getvalue() == "post-restart"

    events = [
        AuditEvent.model_validate_json(line)
        for line in (stack.broker.state_dir / "audit.jsonl").read_text().splitlines()
        if line.strip()
    ]
    folded = reduce_events(events)

    for run_id, run in folded.runs.items():
        live = stack.ci.get_run(run_id)
        assert live["state"] == run.state.value, run_id
        if run.result is not None:
            assert live["result"]["exit_code"] == run.result.exit_code

    live_endpoints = {e["endpoint_id"]: e for e in stack.ci.list_endpoints()}
    assert set(live_endpoints) == set(folded.endpoints)
    for endpoint_id, record in folded.endpoints.items():
        live = live_endpoints[endpoint_id]
        assert live["display_name"] == record.display_name
        assert live["protected"] == record.protected
        assert live["reviewer"] == record.reviewer
        assert tuple(live["allow_list"]) == record.allow_list


def test_criterion_8_exit_code_faithfulness(stack, tmp_path):
    rng = random.Random(20260817)
    codes = [rng.randrange(6) for _ in range(50)]
    cloud_id = stack.endpoints["cloud"]["endpoint_id"]

    def one(index_and_code):
        index, code = index_and_code
        inputs = StepInputs(
            sites={"default": cloud_id},
            shell_cmd=f"exit {code}",
            timeout_seconds=60,
            artifact_dir=tmp_path / f"run-{index}",
            poll_interval_seconds=0.05,
        )
        client = UserClient(stack.broker.url, token=stack.ci.token)
        exit_code = run_step(inputs, client, out=StringIO(), err=StringIO())
        report = json.loads((tmp_path / f"run-{index}" / "report.json").read_text())
        return code, exit_code, report["sites"][0]["exit_code"]

    with ThreadPoolExecutor(max_workers=8) as pool:
        rows = list(pool.map(one, enumerate(codes)))

    mismatches = [
        row
        for row in rows
        if (row[1] == 0) != (row[0] == 0) or row[2] != row[0]
    ]
    assert not mismatches, f"(remote, step exit, reported) rows off: {mismatches}"


def test_criterion_9_dashboard_loop():
    """The review dashboard builds and its suite passes; the suite includes a
    live-broker loop proving a pending protected run is shown with the
    verbatim command, approval by the reviewer reaches queued within two
    refresh intervals and is audited under the reviewer's identity, and
    non-reviewer sessions get no action buttons."""
    frontend = Path(__file__).resolve().parent.parent / "frontend"
    if not (frontend / "node_modules").is_dir():
        pytest.fail("frontend dependencies missing; run npm install in frontend/")
    for args in (["npm", "run", "build"], ["npm", "test", "--", "--silent"]):
        proc = subprocess.run(
            args, cwd=frontend, capture_output=True, text=True, timeout=240
        )
        assert proc.returncode == 0, (
            f"{' '.join(args)} failed:\n{proc.stdout}\n{proc.stderr}"
        )
