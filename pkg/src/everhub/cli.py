"""Command-line entry points: serve the hub, check a repository, version."""

from __future__ import annotations

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .config import ConfigError, load_config
from .intake import (
    Checkout,
    GitCliFetcher,
    IntakeError,
    RepoManifest,
    fetch_repository,
    inspect_manifest,
    parse_repo_url,
    RepoRef,
)


@click.group()
def main() -> None:
    """everhub: launch interactive container sessions from git repositories."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="TOML configuration file.")
@click.option("--listen", "listen_address", default=None, help="host:port to bind.")
@click.option("--public-url", "public_base_url", default=None, help="Externally visible base URL.")
@click.option("--journal", "journal_path", default=None, help="Session journal file.")
@click.option("--secret-key", "secret_key", default=None,
              help="Token signing key (plain or hex:...), at least 32 bytes.")
@click.option("--runtime-driver", "runtime_driver", type=click.Choice(["docker", "simulated"]),
              default=None, help="Container runtime driver.")
def serve(config_path: str | None, **flags: str | None) -> None:
    """Run the hub until interrupted."""
    try:
        config = load_config(config_path, overrides={k: v for k, v in flags.items() if v is not None})
        config.validate()
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    from .app import serve as run_hub

    run_hub(config)


@main.command("check-repo")
@click.argument("target")
@click.option("--ref", default=None, help="Branch, tag, or commit to check (remote targets).")
def check_repo(target: str, ref: str | None) -> None:
    """Fetch TARGET (https URL or local directory) and print its launch checklist.

    Exits 0 when the repository is launchable, 1 when it is not.
    """
    local = Path(target)
    if local.is_dir():
        checkout = Checkout(
            repo=RepoRef(host="localhost", owner="local", name=local.name or "checkout",
                         resolved_commit="0" * 40),
            root_path=local,
        )
        manifest = inspect_manifest(checkout)
        _print_checklist(target, manifest)
        sys.exit(0 if manifest.launchable else 1)

    try:
        repo = parse_repo_url(target)
        if ref:
            repo = replace(repo, requested_ref=ref)
        with tempfile.TemporaryDirectory(prefix="everhub-check-") as workdir:
            checkout = fetch_repository(repo, Path(workdir), GitCliFetcher())
            manifest = inspect_manifest(checkout)
            click.echo(f"commit: {checkout.repo.resolved_commit}")
            _print_checklist(repo.canonical_url, manifest)
    except IntakeError as exc:
        raise click.ClickException(str(exc))
    sys.exit(0 if manifest.launchable else 1)


def _print_checklist(target: str, manifest: RepoManifest) -> None:
    def mark(ok: bool) -> str:
        return "ok " if ok else "-- "

    click.echo(f"repository: {target}")
    click.echo(f"  {mark(manifest.has_dockerfile)}environment   Dockerfile")
    click.echo(f"  {mark(manifest.has_readme)}assumptions   README")
    click.echo(f"  {mark(bool(manifest.notebook_paths))}code          {len(manifest.notebook_paths)} notebook(s)")
    click.echo(f"  {mark(manifest.workflow_path is not None)}workflow      {manifest.workflow_path or 'none'}")
    click.echo(f"  {mark(manifest.ci_config_path is not None)}checks        {manifest.ci_config_path or 'none'}")
    click.echo(f"launchable: {'yes' if manifest.launchable else 'no (a root Dockerfile is required)'}")


@main.command()
def version() -> None:
    """Print the hub version."""
    click.echo(__version__)


if __name__ == "__main__":
    main()
