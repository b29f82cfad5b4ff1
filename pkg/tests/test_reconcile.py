"""Restart recovery: route restoration, failing in-flight work, orphans."""

from __future__ import annotations

from pathlib import Path

import pytest

from everhub.builder import BuildLogStore
from everhub.intake import LocalCopyFetcher
from everhub.journal import Journal
from everhub.proxy import RouteTable
from everhub.runtime import RuntimeEndpoint, SESSION_LABEL, SimulatedDriver
from everhub.sessions import QuotaPolicy, SessionManager
from everhub.state import SessionState

from conftest import FIXTURE_COMMIT, JOURNALS, wait_until

pytestmark = pytest.mark.anyio

URL = "https://github.com/team/project"


def make_manager(tmp_path: Path, fixture_dir, driver, name="journal.jsonl", **kwargs) -> SessionManager:
    journal_path = tmp_path / name
    if journal_path not in JOURNALS:
        JOURNALS.append(journal_path)
    defaults = dict(
        journal=Journal(journal_path),
        routes=RouteTable(),
        log_store=BuildLogStore(),
        default_driver=driver,
        driver_factory=lambda endpoint: SimulatedDriver(endpoint),
        fetcher=LocalCopyFetcher(fixture_dir, FIXTURE_COMMIT),
        workdir=tmp_path / "work",
        quota=QuotaPolicy(max_sessions_per_user=5, max_total_sessions=20),
        fetch_timeout=5.0,
        build_timeout=5.0,
    )
    defaults.update(kwargs)
    return SessionManager(**defaults)


async def crash(manager: SessionManager) -> None:
    """Abandon a manager as if the hub process died."""
    await manager.aclose()
    manager.journal.close()


async def test_running_session_restored_with_live_route(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.RUNNING)
    backend = first.get(session.id).container.host_address
    await crash(first)

    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert report.restored == [session.id]
    assert report.failed == [] and report.orphans_removed == []

    restored = second.get(session.id)
    assert restored.state is SessionState.RUNNING
    route = second.routes.resolve(restored.route_path)
    assert route is not None and route.backend == backend
    await crash(second)


async def test_running_session_with_lost_container_fails(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.RUNNING)
    await crash(first)
    cluster.containers.clear()  # the container died with the node

    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert report.failed == [session.id]
    restored = second.get(session.id)
    assert restored.state is SessionState.FAILED
    assert restored.failure.stage == "runtime"
    assert second.routes.resolve(restored.route_path) is None
    await crash(second)


async def test_in_flight_build_fails_on_restart(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    cluster.script_build(lines=["slow"] * 100, delay_per_line=0.05)
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.BUILDING)
    await crash(first)  # dies mid-build

    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert report.restored == []
    assert report.failed == [session.id]
    restored = second.get(session.id)
    assert restored.state is SessionState.FAILED
    assert restored.failure.stage == "restart"
    assert "not resumable" in restored.failure.detail
    await crash(second)


async def test_pending_session_is_stopped_on_restart(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    journal = Journal(tmp_path / "journal.jsonl")
    JOURNALS.append(tmp_path / "journal.jsonl")
    # Snapshot a Pending session as if the hub died before Begin.
    journal.append_snapshot(
        "sessionx",
        {
            "id": "sessionx",
            "user_login": "alice",
            "repo": {"host": "h.io", "owner": "o", "name": "n", "requested_ref": "HEAD", "resolved_commit": ""},
            "state": "pending",
            "image_tag": "",
            "container": None,
            "route_path": "/user/alice/sessionx/",
            "created_at": 1.0,
            "last_activity_at": 1.0,
            "failure": None,
            "endpoint_label": "",
        },
    )
    journal.close()

    manager = make_manager(tmp_path, fixture_repo, cluster)
    report = await manager.reconcile()
    assert report.stopped == ["sessionx"]
    assert manager.get("sessionx").state is SessionState.STOPPED
    await crash(manager)


async def test_orphan_container_removed(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    cluster.adopt("orphan-1", labels={SESSION_LABEL: "ghost-session"})
    cluster.adopt("foreign-1", labels={"someone": "else"})

    manager = make_manager(tmp_path, fixture_repo, cluster)
    report = await manager.reconcile()
    assert report.orphans_removed == ["orphan-1"]
    assert "orphan-1" not in cluster.containers
    assert "foreign-1" in cluster.containers  # unlabeled containers are not ours
    await crash(manager)


async def test_orphan_of_terminal_session_removed(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.RUNNING)
    container_id = first.get(session.id).container.container_id
    await first.stop_session(session.id, "alice")
    await wait_until(lambda: first.get(session.id).state is SessionState.STOPPED)
    cluster.adopt(container_id, labels={SESSION_LABEL: session.id})  # resurrect as leftover
    await crash(first)

    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert report.orphans_removed == [container_id]
    await crash(second)


async def test_unreachable_endpoint_leaves_sessions_flagged(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.RUNNING)
    await crash(first)

    cluster.unreachable = True
    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert report.unreachable_endpoints == [cluster.endpoint.label]
    assert report.unresolved_sessions == [session.id]
    restored = second.get(session.id)
    assert restored.state is SessionState.RUNNING  # untouched
    assert second.routes.resolve(restored.route_path) is not None

    # The endpoint comes back with the container alive: session stays Running.
    cluster.unreachable = False
    await second.retry_unresolved()
    assert second.get(session.id).state is SessionState.RUNNING
    assert second._unresolved == set()
    await crash(second)


async def test_unreachable_then_lost_container_fails_on_retry(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    session = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(session.id).state is SessionState.RUNNING)
    await crash(first)

    cluster.unreachable = True
    second = make_manager(tmp_path, fixture_repo, cluster)
    await second.reconcile()
    cluster.unreachable = False
    cluster.containers.clear()
    await second.retry_unresolved()
    restored = second.get(session.id)
    assert restored.state is SessionState.FAILED
    assert restored.failure.stage == "runtime"
    assert second.routes.resolve(restored.route_path) is None
    await crash(second)


async def test_byor_assignment_survives_restart(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    endpoint = RuntimeEndpoint(address="10.9.9.9:2375", label="byor:alice")
    await first.set_byor_endpoint("alice", endpoint)
    await crash(first)

    second = make_manager(tmp_path, fixture_repo, cluster)
    await second.reconcile()
    assert second.byor_endpoint("alice") == endpoint
    await crash(second)


async def test_stopped_and_failed_sessions_survive_as_history(tmp_path, fixture_repo):
    cluster = SimulatedDriver()
    first = make_manager(tmp_path, fixture_repo, cluster)
    good = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(good.id).state is SessionState.RUNNING)
    await first.stop_session(good.id, "alice")
    await wait_until(lambda: first.get(good.id).state is SessionState.STOPPED)

    cluster.script_build(lines=["boom"], success=False, detail="exploded")
    bad = await first.request_launch("alice", URL)
    await wait_until(lambda: first.get(bad.id).state is SessionState.FAILED)
    await crash(first)

    second = make_manager(tmp_path, fixture_repo, cluster)
    report = await second.reconcile()
    assert second.get(good.id).state is SessionState.STOPPED
    assert second.get(bad.id).state is SessionState.FAILED
    assert second.get(bad.id).failure.detail.startswith("exploded") or "exploded" in second.get(bad.id).failure.detail
    assert report.restored == [] and report.failed == []
    await crash(second)
