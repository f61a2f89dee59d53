import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedci.protocol import (
    MAX_STREAM_BYTES,
    ArtifactBundle,
    ArtifactFile,
    AuditAction,
    AuditEvent,
    BearerToken,
    EndpointMode,
    EndpointRecord,
    ProvenanceSnapshot,
    RepoRef,
    SchemaError,
    TaskKind,
    TaskRun,
    TaskSpec,
    decode_message,
    encode_message,
    filter_captured_env,
    truncate_stream,
)

from .genrandom import random_run


def roundtrip(msg, model):
    return decode_message(encode_message(msg), model)


def test_shell_spec_roundtrips():
    spec = TaskSpec(
        endpoint_id="ep-1",
        kind=TaskKind.SHELL,
        shell_cmd="tox",
        env={},
        repo=RepoRef(url="https://example.org/proj.git", ref="main"),
        timeout_seconds=600,
        requested_by="alice@site-a",
    )
    back = roundtrip(spec, TaskSpec)
    assert back == spec
    assert back.shell_cmd == "tox"


def test_empty_env_roundtrips_as_empty_map():
    spec = TaskSpec(
        endpoint_id="ep-1",
        kind=TaskKind.SHELL,
        shell_cmd="true",
        env={},
        timeout_seconds=5,
        requested_by="alice@site-a",
    )
    raw = encode_message(spec)
    assert b'"env":{}' in raw
    assert roundtrip(spec, TaskSpec).env == {}


def test_thousand_random_runs_roundtrip_byte_identical():
    rng = random.Random(20240917)
    for _ in range(1000):
        run = random_run(rng)
        raw = encode_message(run)
        back = decode_message(raw, TaskRun)
        assert back == run
        assert encode_message(back) == raw


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**40), st.integers(min_value=1, max_value=2**30))
def test_bearer_token_roundtrip(issued, delta):
    tok = BearerToken(token="a" * 32, subject="alice@site-a", issued_at=issued, expires_at=issued + delta)
    assert roundtrip(tok, BearerToken) == tok


def test_decode_rejects_unknown_field():
    raw = b'{"url": "x", "ref": "main", "branch": "main"}'
    with pytest.raises(SchemaError) as exc:
        decode_message(raw, RepoRef)
    assert exc.value.field == "branch"


def test_decode_names_offending_field_on_bad_type():
    raw = b'{"url": "x", "ref": 7}'
    with pytest.raises(SchemaError) as exc:
        decode_message(raw, RepoRef)
    assert exc.value.field == "ref"


def test_spec_requires_exactly_one_payload():
    with pytest.raises(ValueError):
        TaskSpec(
            endpoint_id="e",
            kind=TaskKind.SHELL,
            shell_cmd="true",
            function_id="f",
            timeout_seconds=1,
            requested_by="a",
        )
    with pytest.raises(ValueError):
        TaskSpec(endpoint_id="e", kind=TaskKind.FUNCTION, timeout_seconds=1, requested_by="a")


def test_protected_endpoint_requires_reviewer():
    with pytest.raises(ValueError):
        EndpointRecord(
            endpoint_id="e",
            display_name="hpc",
            mode=EndpointMode.MULTI_USER,
            protected=True,
            agent_key_hash="h",
        )


def test_allow_list_is_canonically_sorted():
    rec = EndpointRecord(
        endpoint_id="e",
        display_name="hpc",
        mode=EndpointMode.MULTI_USER,
        protected=False,
        allow_list=["zz", "aa", "zz"],
        agent_key_hash="h",
    )
    assert rec.allow_list == ("aa", "zz")


def test_run_rejects_broken_transition_chain():
    from fedci.protocol import RunState, Transition

    spec = TaskSpec(
        endpoint_id="e", kind=TaskKind.SHELL, shell_cmd="true", timeout_seconds=1, requested_by="a"
    )
    with pytest.raises(ValueError):
        TaskRun(
            run_id="r",
            spec=spec,
            state=RunState.CLAIMED,
            transitions=(
                Transition(from_state=RunState.SUBMITTED, to_state=RunState.QUEUED, at=1, actor="a"),
                # gap: queued -> staging is not an edge
                Transition(from_state=RunState.QUEUED, to_state=RunState.STAGING, at=2, actor="a"),
            ),
        )


def test_run_requires_result_iff_terminal_outcome():
    from fedci.protocol import RunState, Transition

    spec = TaskSpec(
        endpoint_id="e", kind=TaskKind.SHELL, shell_cmd="true", timeout_seconds=1, requested_by="a"
    )
    from .genrandom import random_result

    queued_transitions = (
        Transition(from_state=RunState.SUBMITTED, to_state=RunState.QUEUED, at=1, actor="a"),
    )
    # queued with a result is illegal
    with pytest.raises(ValueError):
        TaskRun(
            run_id="r",
            spec=spec,
            state=RunState.QUEUED,
            transitions=queued_transitions,
            result=random_result(random.Random(1)),
        )
    # completed without a result is illegal
    completed_transitions = queued_transitions + (
        Transition(from_state=RunState.QUEUED, to_state=RunState.CLAIMED, at=2, actor="a"),
        Transition(from_state=RunState.CLAIMED, to_state=RunState.STAGING, at=3, actor="a"),
        Transition(from_state=RunState.STAGING, to_state=RunState.RUNNING, at=4, actor="a"),
        Transition(from_state=RunState.RUNNING, to_state=RunState.COMPLETED, at=5, actor="a"),
    )
    with pytest.raises(ValueError):
        TaskRun(
            run_id="r",
            spec=spec,
            state=RunState.COMPLETED,
            transitions=completed_transitions,
            result=None,
        )
    # queued without a result is fine
    run = TaskRun(run_id="r", spec=spec, state=RunState.QUEUED, transitions=queued_transitions)
    assert run.result is None


def test_provenance_rejects_secret_keys():
    with pytest.raises(ValueError):
        ProvenanceSnapshot(
            hostname="h",
            os_description="os",
            captured_env={"MY_SECRET_TOKEN": "x"},
            tool_versions={},
            captured_at=1,
        )


def test_filter_captured_env_drops_denied_keys():
    env = {"PATH": "/usr/bin", "MY_SECRET_TOKEN": "x", "API_KEY": "y", "HOME": "/root"}
    assert filter_captured_env(env) == {"PATH": "/usr/bin", "HOME": "/root"}


def test_truncate_stream_caps_and_flags():
    text, truncated = truncate_stream(b"A" * (MAX_STREAM_BYTES + 10))
    assert truncated and len(text) == MAX_STREAM_BYTES
    text, truncated = truncate_stream(b"hello")
    assert not truncated and text == "hello"


def test_audit_event_roundtrip():
    ev = AuditEvent(
        seq=1,
        timestamp=123,
        actor="alice@site-a",
        action=AuditAction.TASK_SUBMITTED,
        subject="run-1",
        details={"endpoint_id": "ep-1", "state": "queued"},
    )
    assert roundtrip(ev, AuditEvent) == ev


def test_artifact_bundle_defaults():
    b = ArtifactBundle(
        artifact_id="a",
        run_id="r",
        files=(ArtifactFile(relative_path="stdout.txt", byte_size=3, digest="d"),),
        created_at=5,
    )
    assert b.retention_days == 90 and b.purged is False
