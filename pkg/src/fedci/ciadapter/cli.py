"""`ci-run`: the command a CI step invokes to execute work remotely.

Credentials come from CI_CLIENT_ID plus CI_CLIENT_SECRET (or a secret
file); the secret is never accepted as a bare command line argument
because argv is world-readable on most systems.
"""

from __future__ import annotations

import os
import sys
import time
from pathlib import Path
from typing import Optional

import click
import yaml

from .client import AuthError, BrokerUnreachable, UserClient
from .step import (
    EXIT_AUTH,
    EXIT_RUN_FAILED,
    EXIT_UNREACHABLE,
    StepInputs,
    run_matrix,
    run_step,
)

TOKEN_ATTEMPTS = 3


def _fail(code: int, reason: str, detail: str = "") -> "click.exceptions.Exit":
    line = f"ci-run: reason={reason}"
    if detail:
        line += f" detail={detail!r}"
    click.echo(line, err=True)
    return click.exceptions.Exit(code)


def _load_matrix(path: Path) -> dict[str, str]:
    try:
        raw = yaml.safe_load(path.read_text("utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise _fail(EXIT_RUN_FAILED, "bad_matrix_file", str(exc))
    if not isinstance(raw, dict) or not raw:
        raise _fail(EXIT_RUN_FAILED, "bad_matrix_file", "expected a label -> endpoint_id mapping")
    return {str(label): str(endpoint) for label, endpoint in raw.items()}


def _issue_token(broker_url: str, client_id: str, client_secret: str) -> str:
    client = UserClient(broker_url)
    last_error: Optional[BrokerUnreachable] = None
    for attempt in range(TOKEN_ATTEMPTS):
        try:
            return client.issue_token(client_id, client_secret)
        except AuthError as exc:
            raise _fail(EXIT_AUTH, "auth_failure", str(exc))
        except BrokerUnreachable as exc:
            last_error = exc
            if attempt + 1 < TOKEN_ATTEMPTS:
                time.sleep(1.0)
    raise _fail(EXIT_UNREACHABLE, "broker_unreachable", str(last_error))


@click.command()
@click.option("--endpoint", "endpoint_id", help="Target endpoint id.")
@click.option(
    "--matrix",
    "matrix_file",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="YAML file mapping site labels to endpoint ids; runs the step on every site.",
)
@click.option("--shell", "shell_cmd", help="Shell command to execute remotely.")
@click.option("--function", "function_id", help="Id of a pre-registered function to execute.")
@click.option("--arg", "args", multiple=True, help="Positional argument (repeatable).")
@click.option("--repo-url", envvar="CI_REPO_URL", help="Repository to stage on the remote side.")
@click.option("--repo-ref", envvar="CI_REPO_REF", help="Ref to check out (default HEAD).")
@click.option("--timeout", "timeout_seconds", type=int, default=600, show_default=True)
@click.option(
    "--artifact-dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for downloaded artifacts, manifest, and report.json.",
)
@click.option(
    "--broker",
    "broker_url",
    envvar="CI_BROKER_URL",
    default="http://127.0.0.1:8765",
    show_default=True,
)
@click.option("--client-id", envvar="CI_CLIENT_ID", help="Client id (or env CI_CLIENT_ID).")
@click.option(
    "--secret-file",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="File holding the client secret (alternative to env CI_CLIENT_SECRET).",
)
@click.option("--fan-out", type=int, default=3, show_default=True, help="Concurrent sites.")
@click.option(
    "--deadline-slack",
    "deadline_slack_seconds",
    type=float,
    default=120.0,
    show_default=True,
    help="Scheduling slack added to --timeout for the local wait deadline.",
)
@click.option("--poll-interval", "poll_interval_seconds", type=float, default=1.0, hidden=True)
def main(
    endpoint_id: Optional[str],
    matrix_file: Optional[Path],
    shell_cmd: Optional[str],
    function_id: Optional[str],
    args: tuple[str, ...],
    repo_url: Optional[str],
    repo_ref: Optional[str],
    timeout_seconds: int,
    artifact_dir: Optional[Path],
    broker_url: str,
    client_id: Optional[str],
    secret_file: Optional[Path],
    fan_out: int,
    deadline_slack_seconds: float,
    poll_interval_seconds: float,
) -> None:
    """Run a task on one or many remote endpoints and mirror its outcome."""
    if (endpoint_id is None) == (matrix_file is None):
        raise _fail(EXIT_RUN_FAILED, "bad_arguments", "exactly one of --endpoint / --matrix")
    if (shell_cmd is None) == (function_id is None):
        raise _fail(EXIT_RUN_FAILED, "bad_arguments", "exactly one of --shell / --function")
    if not client_id:
        raise _fail(EXIT_AUTH, "missing_credentials", "set CI_CLIENT_ID or pass --client-id")

    client_secret = os.environ.get("CI_CLIENT_SECRET", "")
    if secret_file is not None:
        client_secret = secret_file.read_text("utf-8").strip()
    if not client_secret:
        raise _fail(EXIT_AUTH, "missing_credentials", "set CI_CLIENT_SECRET or pass --secret-file")

    sites = {"default": endpoint_id} if endpoint_id else _load_matrix(matrix_file)
    inputs = StepInputs(
        sites=sites,
        shell_cmd=shell_cmd,
        function_id=function_id,
        args=tuple(args),
        repo_url=repo_url,
        repo_ref=repo_ref,
        timeout_seconds=timeout_seconds,
        artifact_dir=artifact_dir,
        fan_out=fan_out,
        deadline_slack_seconds=deadline_slack_seconds,
        poll_interval_seconds=poll_interval_seconds,
    )

    token = _issue_token(broker_url, client_id, client_secret)
    if len(sites) == 1:
        client = UserClient(broker_url, token=token)
        code = run_step(inputs, client, out=sys.stdout, err=sys.stderr)
    else:
        code = run_matrix(
            inputs,
            lambda: UserClient(broker_url, token=token),
            out=sys.stdout,
            err=sys.stderr,
        )
    raise click.exceptions.Exit(code)


if __name__ == "__main__":
    main()
