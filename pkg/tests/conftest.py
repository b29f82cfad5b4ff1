"""Shared fixtures: fixture repositories, hub assembly, in-process servers."""

from __future__ import annotations

import asyncio
import socket
import subprocess
import time
from pathlib import Path

import pytest
import uvicorn

from everhub.app import Hub
from everhub.config import HubConfig
from everhub.intake import LocalCopyFetcher

# Journal files produced by hub-backed tests; the acceptance suite replays
# every one of them through the transition table.
JOURNALS: list[Path] = []

FIXTURE_COMMIT = "a" * 40

# Canonical launchable layout: environment, docs, code, workflow, CI config.
FULL_LAYOUT = {
    "Dockerfile": "FROM python:3\n",
    "README.md": "# analysis\n",
    "analysis.ipynb": '{"cells": []}\n',
    "Makefile": "all:\n\ttrue\n",
    "circle.yml": "test:\n  override:\n    - make\n",
}


@pytest.fixture(scope="session")
def anyio_backend():
    return "asyncio"


def make_repo_dir(base: Path, files: dict[str, str], name: str = "repo") -> Path:
    root = base / name
    for rel, content in files.items():
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content)
    root.mkdir(parents=True, exist_ok=True)
    return root


def make_git_repo(base: Path, files: dict[str, str], name: str = "gitrepo") -> tuple[Path, str]:
    """Create a real git repository; returns (path, HEAD hash read via git)."""
    root = make_repo_dir(base, files, name=name)
    run = lambda *args: subprocess.run(
        ["git", *args], cwd=root, check=True, capture_output=True, text=True
    )
    run("init", "--quiet", "--initial-branch", "main")
    run("config", "user.email", "fixture@example.invalid")
    run("config", "user.name", "Fixture")
    run("add", "-A")
    run("commit", "--quiet", "-m", "fixture")
    head = run("rev-parse", "HEAD").stdout.strip()
    return root, head


@pytest.fixture
def fixture_repo(tmp_path: Path) -> Path:
    return make_repo_dir(tmp_path, FULL_LAYOUT, name="fixture-repo")


def hub_config(tmp_path: Path, **overrides) -> HubConfig:
    defaults = dict(
        listen_address="127.0.0.1:0",
        public_base_url="http://127.0.0.1:0",
        secret_key=b"0123456789abcdef0123456789abcdef",
        journal_path=str(tmp_path / "journal.jsonl"),
        workdir=str(tmp_path / "work"),
        runtime_driver="simulated",
        auth_provider="static",
        static_users={"ok-alice": "alice", "ok-bob": "bob", "ok-root": "root-admin"},
        admins=("root-admin",),
        fetch_timeout_seconds=10.0,
        build_timeout_seconds=10.0,
    )
    defaults.update(overrides)
    return HubConfig(**defaults)


def build_hub(tmp_path: Path, fixture_dir: Path | None = None, **config_overrides) -> Hub:
    config = hub_config(tmp_path, **config_overrides)
    fetcher = LocalCopyFetcher(fixture_dir, FIXTURE_COMMIT) if fixture_dir else None
    hub = Hub(config, fetcher=fetcher)
    JOURNALS.append(Path(config.journal_path))
    return hub


@pytest.fixture
async def make_hub(tmp_path: Path):
    hubs: list[Hub] = []

    def factory(fixture_dir: Path | None = None, **overrides) -> Hub:
        hub = build_hub(tmp_path, fixture_dir, **overrides)
        hubs.append(hub)
        return hub

    yield factory

    for hub in hubs:
        await hub.shutdown()


class RunningServer:
    def __init__(self, server: uvicorn.Server, task: asyncio.Task, port: int):
        self.server = server
        self.task = task
        self.port = port
        self.url = f"http://127.0.0.1:{port}"

    async def stop(self) -> None:
        self.server.should_exit = True
        await self.task


async def start_server(asgi, lifespan: str = "off") -> RunningServer:
    config = uvicorn.Config(
        asgi, host="127.0.0.1", port=0, log_level="warning", lifespan=lifespan, access_log=False
    )
    server = uvicorn.Server(config)
    task = asyncio.create_task(server.serve())
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            task.cancel()
            raise RuntimeError("uvicorn did not start")
        await asyncio.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    return RunningServer(server, task, port)


async def wait_until(predicate, timeout: float = 5.0, interval: float = 0.02):
    """Poll until predicate() is truthy; fail the test on timeout."""
    deadline = time.monotonic() + timeout
    while True:
        value = predicate()
        if value:
            return value
        if time.monotonic() > deadline:
            raise AssertionError(f"condition not reached within {timeout}s")
        await asyncio.sleep(interval)


def free_tcp_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


# Acceptance reporting: one line per criterion in the terminal summary.

ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "setup" and report.skipped:
        ACCEPTANCE_RESULTS[name] = "skipped"
    elif report.when == "call":
        ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, outcome in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"  {outcome.upper():7s} {name}")
