"""sim-sched: command line front end for the simulated batch scheduler.

Mimics the shape of common scheduler CLIs so batch command templates can be
exercised end to end:

    sim-sched init --state-dir D [--queue-delay S] [--max-concurrent N]
    sim-sched submit --state-dir D SCRIPT   -> "Submitted batch job sim-N"
    sim-sched status --state-dir D JOB_ID   -> one of pending|running|done|failed
    sim-sched cancel --state-dir D JOB_ID
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .simsched import FileSimScheduler, UnknownJobError


@click.group()
def main() -> None:
    """Simulated batch scheduler."""


state_dir_option = click.option(
    "--state-dir",
    required=True,
    type=click.Path(path_type=Path),
    envvar="SIM_SCHED_STATE_DIR",
)


@main.command()
@state_dir_option
@click.option("--queue-delay", default=0.0, show_default=True, type=float)
@click.option("--max-concurrent", default=4, show_default=True, type=int)
@click.option("--job-runtime", default=None, type=float,
              help="seconds a job runs before finishing on its own (default: until cancelled)")
def init(state_dir: Path, queue_delay: float, max_concurrent: int, job_runtime: float | None) -> None:
    FileSimScheduler.init(
        state_dir,
        queue_delay_seconds=queue_delay,
        max_concurrent_jobs=max_concurrent,
        job_runtime_seconds=job_runtime,
    )
    click.echo(f"initialized scheduler state in {state_dir}")


@main.command()
@state_dir_option
@click.argument("script", type=click.Path(path_type=Path))
def submit(state_dir: Path, script: Path) -> None:
    if not script.exists():
        click.echo(f"script not found: {script}", err=True)
        sys.exit(1)
    job_id = FileSimScheduler(state_dir).submit(str(script))
    click.echo(f"Submitted batch job {job_id}")


@main.command()
@state_dir_option
@click.argument("job_id")
def status(state_dir: Path, job_id: str) -> None:
    try:
        click.echo(FileSimScheduler(state_dir).status(job_id))
    except UnknownJobError:
        click.echo(f"unknown job: {job_id}", err=True)
        sys.exit(1)


@main.command()
@state_dir_option
@click.argument("job_id")
def cancel(state_dir: Path, job_id: str) -> None:
    try:
        FileSimScheduler(state_dir).cancel(job_id)
    except UnknownJobError:
        click.echo(f"unknown job: {job_id}", err=True)
        sys.exit(1)
    click.echo(f"cancelled {job_id}")


if __name__ == "__main__":
    main()
