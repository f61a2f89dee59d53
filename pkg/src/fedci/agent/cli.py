"""Command line entry point for the execution agent."""

from __future__ import annotations

import logging
import signal
import sys

import click

from .config import ConfigError, load_config
from .daemon import AgentDaemon


@click.group()
def main() -> None:
    """Outbound-only execution agent."""


@main.command()
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Agent configuration file (YAML).",
)
@click.option(
    "--once",
    is_flag=True,
    help="Run a single poll cycle and exit (for smoke tests).",
)
@click.option("--verbose", is_flag=True, help="Log at debug level.")
def run(config_path: str, once: bool, verbose: bool) -> None:
    """Poll the broker and execute claimed tasks until interrupted."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(2)
    daemon = AgentDaemon(config)

    def handle_signal(signum, frame) -> None:
        daemon.stop()

    signal.signal(signal.SIGTERM, handle_signal)
    signal.signal(signal.SIGINT, handle_signal)

    if once:
        try:
            dispatched = daemon.step()
        finally:
            daemon.shutdown()
        click.echo(f"dispatched {dispatched} task(s)", err=True)
        return
    daemon.run()
    if daemon.fatal_error is not None:
        raise SystemExit(2)


if __name__ == "__main__":
    main()
