"""Broker command line: serve the HTTP API and bootstrap client credentials.

Secrets never appear as command line arguments; they are read from a file or
generated and printed once.
"""

from __future__ import annotations

import secrets
import sys
from pathlib import Path

import click

from .core import Broker, BrokerConfig


@click.group()
def main() -> None:
    """Coordination broker for federated CI runs."""


@main.command()
@click.option("--state-dir", required=True, type=click.Path(path_type=Path))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--sweep-interval", default=30.0, show_default=True, type=float)
@click.option("--fsync/--no-fsync", default=False, show_default=True,
              help="fsync the audit log on every write")
def serve(state_dir: Path, host: str, port: int, sweep_interval: float, fsync: bool) -> None:
    """Run the broker API server."""
    import uvicorn

    from .api import create_app

    broker = Broker(state_dir, BrokerConfig(fsync=fsync))
    app = create_app(broker, sweep_interval_seconds=sweep_interval)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("add-credential")
@click.option("--state-dir", required=True, type=click.Path(path_type=Path))
@click.option("--client-id", required=True)
@click.option("--owner", "owner_identity", required=True,
              help="platform identity this credential authenticates as")
@click.option("--secret-file", type=click.Path(path_type=Path),
              help="file containing the client secret")
@click.option("--generate", is_flag=True, help="generate a secret and print it once")
def add_credential(
    state_dir: Path,
    client_id: str,
    owner_identity: str,
    secret_file: Path | None,
    generate: bool,
) -> None:
    """Create or replace a client credential in the broker state directory.

    Run while the broker is stopped; the broker reads credentials at startup.
    """
    if bool(secret_file) == generate:
        click.echo("pass exactly one of --secret-file or --generate", err=True)
        sys.exit(2)
    if generate:
        secret = secrets.token_hex(24)
    else:
        secret = secret_file.read_text("utf-8").strip()
        if not secret:
            click.echo("secret file is empty", err=True)
            sys.exit(2)
    broker = Broker(state_dir)
    broker.add_credential(client_id, secret, owner_identity)
    broker.close()
    if generate:
        click.echo(f"client_id: {client_id}")
        click.echo(f"client_secret: {secret}")
        click.echo("store the secret now; only a hash is kept", err=True)
    else:
        click.echo(f"credential {client_id} stored")


if __name__ == "__main__":
    main()
