"""Session lifecycle management.

Owns the clone, build, spawn pipeline as background tasks, enforces
quotas, culls idle sessions, journals every state change, and reconciles
with the container runtimes after a restart. State transitions for one
session are serialized; different sessions progress concurrently.
"""

from __future__ import annotations

import asyncio
import base64
import logging
import secrets
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

from .builder import BuildLogStore, run_build
from .intake import (
    Checkout,
    Fetcher,
    IntakeError,
    RepoRef,
    compute_image_tag,
    fetch_repository,
    inspect_manifest,
    parse_repo_url,
)
from .journal import Journal, JournalRecord, load_journal
from .proxy import RouteTable
from .runtime import (
    ContainerDriver,
    ContainerHandle,
    ContainerSpec,
    DriverError,
    RuntimeEndpoint,
    RuntimeUnreachable,
    SESSION_LABEL,
)
from .state import SessionEvent, SessionState, transition, IllegalTransition

__all__ = [
    "Session",
    "SessionFailure",
    "QuotaPolicy",
    "SessionError",
    "QuotaExceeded",
    "SessionNotFound",
    "Forbidden",
    "ReconcileReport",
    "SessionManager",
]

logger = logging.getLogger(__name__)

BASE_PATH_ENV = "EVERHUB_BASE_PATH"
USER_LABEL = "everhub.user"

_ERR_EVENTS = {
    SessionEvent.CLONE_ERR,
    SessionEvent.MANIFEST_REJECTED,
    SessionEvent.BUILD_ERR,
    SessionEvent.SPAWN_ERR,
    SessionEvent.RUNTIME_LOST,
}


class SessionError(Exception):
    pass


class QuotaExceeded(SessionError):
    pass


class SessionNotFound(SessionError):
    pass


class Forbidden(SessionError):
    pass


@dataclass(frozen=True)
class SessionFailure:
    stage: str
    detail: str


@dataclass
class QuotaPolicy:
    max_sessions_per_user: int = 2
    max_total_sessions: int = 50
    idle_timeout_seconds: int = 3600

    def __post_init__(self) -> None:
        for name in ("max_sessions_per_user", "max_total_sessions", "idle_timeout_seconds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class Session:
    """One user launch, from request through a running container to the end."""

    id: str
    user_login: str
    repo: RepoRef
    state: SessionState = SessionState.PENDING
    image_tag: str = ""
    container: ContainerHandle | None = None
    route_path: str = ""
    created_at: float = 0.0
    last_activity_at: float = 0.0
    failure: SessionFailure | None = None
    endpoint_label: str = ""

    def to_snapshot(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "user_login": self.user_login,
            "repo": asdict(self.repo),
            "state": self.state.value,
            "image_tag": self.image_tag,
            "container": asdict(self.container) if self.container else None,
            "route_path": self.route_path,
            "created_at": self.created_at,
            "last_activity_at": self.last_activity_at,
            "failure": asdict(self.failure) if self.failure else None,
            "endpoint_label": self.endpoint_label,
        }

    @classmethod
    def from_snapshot(cls, snap: dict[str, Any]) -> "Session":
        return cls(
            id=snap["id"],
            user_login=snap["user_login"],
            repo=RepoRef(**snap["repo"]),
            state=SessionState(snap["state"]),
            image_tag=snap.get("image_tag", ""),
            container=ContainerHandle(**snap["container"]) if snap.get("container") else None,
            route_path=snap["route_path"],
            created_at=snap.get("created_at", 0.0),
            last_activity_at=snap.get("last_activity_at", 0.0),
            failure=SessionFailure(**snap["failure"]) if snap.get("failure") else None,
            endpoint_label=snap.get("endpoint_label", ""),
        )


@dataclass
class ReconcileReport:
    restored: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    stopped: list[str] = field(default_factory=list)
    orphans_removed: list[str] = field(default_factory=list)
    unreachable_endpoints: list[str] = field(default_factory=list)
    unresolved_sessions: list[str] = field(default_factory=list)


def new_session_id() -> str:
    """8 lowercase base32 chars over 40 random bits; short enough for URLs."""
    return base64.b32encode(secrets.token_bytes(5)).decode().lower()


class SessionManager:
    def __init__(
        self,
        *,
        journal: Journal,
        routes: RouteTable,
        log_store: BuildLogStore,
        default_driver: ContainerDriver,
        driver_factory: Callable[[RuntimeEndpoint], ContainerDriver] | None = None,
        fetcher: Fetcher | None = None,
        workdir: Path,
        quota: QuotaPolicy | None = None,
        fetch_timeout: float = 120.0,
        build_timeout: float = 900.0,
        container_port: int = 8888,
        memory_limit_bytes: int | None = None,
        cpu_quota_millicores: int | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.journal = journal
        self.routes = routes
        self.log_store = log_store
        self.default_driver = default_driver
        self.driver_factory = driver_factory
        self.fetcher = fetcher
        self.workdir = Path(workdir)
        self.quota = quota or QuotaPolicy()
        self.fetch_timeout = fetch_timeout
        self.build_timeout = build_timeout
        self.container_port = container_port
        self.memory_limit_bytes = memory_limit_bytes
        self.cpu_quota_millicores = cpu_quota_millicores
        self.clock = clock

        self.sessions: dict[str, Session] = {}
        self._locks: dict[str, asyncio.Lock] = {}
        self._pipeline_active: set[str] = set()
        self._finalizing: set[str] = set()
        self._tasks: set[asyncio.Task] = set()
        self._byor_endpoints: dict[str, RuntimeEndpoint] = {}
        self._byor_drivers: dict[str, ContainerDriver] = {}
        self._unresolved: set[str] = set()

    # Launch ---------------------------------------------------------------

    async def request_launch(self, user_login: str, raw_url: str, ref: str | None = None) -> Session:
        """Quota-check, persist a Pending session, and schedule its pipeline."""
        repo = parse_repo_url(raw_url)
        if ref:
            repo = RepoRef(host=repo.host, owner=repo.owner, name=repo.name, requested_ref=ref)

        active_for_user = sum(
            1 for s in self.sessions.values() if s.user_login == user_login and not s.state.terminal
        )
        if active_for_user >= self.quota.max_sessions_per_user:
            raise QuotaExceeded(
                f"{user_login} already has {active_for_user} active sessions "
                f"(limit {self.quota.max_sessions_per_user})"
            )
        active_total = sum(1 for s in self.sessions.values() if not s.state.terminal)
        if active_total >= self.quota.max_total_sessions:
            raise QuotaExceeded(f"hub is at capacity ({self.quota.max_total_sessions} active sessions)")

        session_id = new_session_id()
        while session_id in self.sessions:
            session_id = new_session_id()
        now = self.clock()
        session = Session(
            id=session_id,
            user_login=user_login,
            repo=repo,
            route_path=f"/user/{user_login}/{session_id}/",
            created_at=now,
            last_activity_at=now,
        )
        self.sessions[session_id] = session
        self._locks[session_id] = asyncio.Lock()
        self.journal.append_snapshot(session_id, session.to_snapshot())

        self._pipeline_active.add(session_id)
        self._spawn_task(self._run_pipeline(session))
        return session

    def _spawn_task(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _run_pipeline(self, session: Session) -> None:
        checkout: Checkout | None = None
        container: ContainerHandle | None = None
        try:
            if not await self._apply(session, SessionEvent.BEGIN):
                return

            try:
                checkout = await asyncio.to_thread(
                    fetch_repository, session.repo, self.workdir, self.fetcher, self.fetch_timeout
                )
            except IntakeError as exc:
                await self._apply(
                    session, SessionEvent.CLONE_ERR, {"stage": "clone", "detail": str(exc)}
                )
                return
            session.repo = checkout.repo
            if not await self._apply(
                session, SessionEvent.CLONE_OK, {"commit": checkout.repo.resolved_commit}
            ):
                return

            manifest = inspect_manifest(checkout)
            if not manifest.launchable:
                await self._apply(
                    session,
                    SessionEvent.MANIFEST_REJECTED,
                    {"stage": "manifest", "detail": "repository has no root Dockerfile"},
                )
                return

            driver = self._driver_for(session.user_login)
            session.endpoint_label = driver.endpoint.label
            tag = compute_image_tag(session.user_login, session.repo)
            report = await run_build(
                self.log_store, session.id, checkout, tag, driver, timeout=self.build_timeout
            )
            if not report.ok:
                await self._apply(
                    session, SessionEvent.BUILD_ERR, {"stage": report.stage, "detail": report.detail}
                )
                return
            if not await self._apply(session, SessionEvent.BUILD_OK, {"image_tag": tag}):
                return

            spec = ContainerSpec(
                image_tag=tag,
                exposed_port=self.container_port,
                environment_vars={BASE_PATH_ENV: session.route_path},
                labels={SESSION_LABEL: session.id, USER_LABEL: session.user_login},
                **_limit_overrides(self.memory_limit_bytes, self.cpu_quota_millicores),
            )
            try:
                container = await driver.create_and_start(spec)
            except DriverError as exc:
                await self._apply(
                    session, SessionEvent.SPAWN_ERR, {"stage": "spawn", "detail": str(exc)}
                )
                return
            await self._apply(
                session, SessionEvent.SPAWN_OK, {"container": asdict(container)}
            )
        except Exception:
            logger.exception("launch pipeline for session %s crashed", session.id)
            event = {
                SessionState.CLONING: SessionEvent.CLONE_ERR,
                SessionState.BUILDING: SessionEvent.BUILD_ERR,
                SessionState.SPAWNING: SessionEvent.SPAWN_ERR,
                SessionState.RUNNING: SessionEvent.RUNTIME_LOST,
            }.get(session.state)
            if event is not None:
                await self._apply(
                    session, event, {"stage": "internal", "detail": "unexpected pipeline error"}
                )
        finally:
            self._pipeline_active.discard(session.id)
            if session.state is SessionState.STOPPING:
                await self._finalize_stop(session, container_hint=container)
            if checkout is not None:
                shutil.rmtree(checkout.root_path, ignore_errors=True)

    # Event application ------------------------------------------------------

    async def _apply(
        self, session: Session, event: SessionEvent, payload: dict[str, Any] | None = None
    ) -> bool:
        """Run one legal transition: mutate, journal, sync proxy routes.

        Returns False (and journals nothing) when the event is illegal in
        the session's current state, e.g. a pipeline event racing a stop.
        """
        lock = self._locks.setdefault(session.id, asyncio.Lock())
        async with lock:
            try:
                new_state = transition(session.state, event)
            except IllegalTransition as exc:
                logger.warning("session %s: dropping stale event: %s", session.id, exc)
                return False
            old_state = session.state
            payload = payload or {}

            session.state = new_state
            if event is SessionEvent.BUILD_OK:
                session.image_tag = payload.get("image_tag", session.image_tag)
            elif event is SessionEvent.SPAWN_OK and payload.get("container"):
                session.container = ContainerHandle(**payload["container"])
            elif event in _ERR_EVENTS:
                session.failure = SessionFailure(
                    stage=payload.get("stage", "unknown"), detail=payload.get("detail", "")
                )
            elif event is SessionEvent.STOP_DONE:
                session.container = None

            self.journal.append_event(session.id, event, new_state, payload)

            if new_state is SessionState.RUNNING and old_state is not SessionState.RUNNING:
                session.last_activity_at = self.clock()
                self.routes.register(
                    session.route_path, session.container.host_address, session.id
                )
                self.journal.append_snapshot(session.id, session.to_snapshot())
            elif old_state is SessionState.RUNNING and new_state is not SessionState.RUNNING:
                self.routes.unregister(session.route_path)
            return True

    # Stop, cull, activity ---------------------------------------------------

    async def stop_session(self, session_id: str, requester: str, is_admin: bool = False) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise SessionNotFound(session_id)
        if requester != session.user_login and not is_admin:
            raise Forbidden(f"{requester} may not stop session {session_id}")
        if session.state.terminal:
            return session

        await self._apply(session, SessionEvent.STOP_REQUESTED, {"requester": requester})
        if session.state is SessionState.STOPPING and session.id not in self._pipeline_active:
            self._spawn_task(self._finalize_stop(session))
        return session

    async def _finalize_stop(self, session: Session, container_hint: ContainerHandle | None = None) -> None:
        if session.id in self._finalizing:
            return
        self._finalizing.add(session.id)
        try:
            handle = session.container or container_hint
            if handle is not None:
                try:
                    await self._driver_for_label(handle.runtime).stop_and_remove(handle)
                except DriverError as exc:
                    # Leave it to the next reconcile; the session still ends.
                    logger.warning("session %s: teardown left container behind: %s", session.id, exc)
            await self._apply(session, SessionEvent.STOP_DONE)
        finally:
            self._finalizing.discard(session.id)

    async def cull_idle(self, now: float | None = None) -> list[str]:
        """Stop Running sessions idle strictly longer than the timeout."""
        now = self.clock() if now is None else now
        culled: list[str] = []
        for session in list(self.sessions.values()):
            if session.state is not SessionState.RUNNING:
                continue
            idle = now - session.last_activity_at
            if idle > self.quota.idle_timeout_seconds:
                if await self._apply(session, SessionEvent.IDLE_TIMEOUT, {"idle_seconds": idle}):
                    culled.append(session.id)
                    self._spawn_task(self._finalize_stop(session))
        return culled

    def touch(self, session_id: str) -> None:
        session = self.sessions.get(session_id)
        if session is not None:
            session.last_activity_at = max(self.clock(), session.last_activity_at + 1e-6)

    # Lookup -----------------------------------------------------------------

    def get(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise SessionNotFound(session_id) from None

    def list_sessions(self, login: str | None = None) -> list[Session]:
        sessions = sorted(self.sessions.values(), key=lambda s: s.created_at)
        if login is None:
            return sessions
        return [s for s in sessions if s.user_login == login]

    def owner_of(self, session_id: str) -> str | None:
        session = self.sessions.get(session_id)
        return session.user_login if session else None

    # BYOR ---------------------------------------------------------------

    def byor_endpoint(self, login: str) -> RuntimeEndpoint | None:
        return self._byor_endpoints.get(login)

    async def set_byor_endpoint(self, login: str, endpoint: RuntimeEndpoint | None) -> bool:
        """Point a user's future launches at their own runtime (or revert).

        Returns whether the endpoint answered a liveness ping; an unreachable
        endpoint is stored anyway and flagged by the caller.
        """
        old = self._byor_drivers.pop(login, None)
        if old is not None and old is not self.default_driver:
            await old.close()
        if endpoint is None:
            self._byor_endpoints.pop(login, None)
            self.journal.append_byor(login, None)
            return True
        if self.driver_factory is None:
            raise SessionError("no driver factory configured for user endpoints")
        driver = self.driver_factory(endpoint)
        self._byor_endpoints[login] = endpoint
        self._byor_drivers[login] = driver
        self.journal.append_byor(login, asdict(endpoint))
        return await driver.ping()

    def _driver_for(self, login: str) -> ContainerDriver:
        driver = self._byor_drivers.get(login)
        if driver is not None:
            return driver
        endpoint = self._byor_endpoints.get(login)
        if endpoint is not None and self.driver_factory is not None:
            driver = self.driver_factory(endpoint)
            self._byor_drivers[login] = driver
            return driver
        return self.default_driver

    def _driver_for_label(self, label: str) -> ContainerDriver:
        if label == self.default_driver.endpoint.label:
            return self.default_driver
        for driver in self._byor_drivers.values():
            if driver.endpoint.label == label:
                return driver
        return self.default_driver

    def _all_drivers(self) -> list[ContainerDriver]:
        return [self.default_driver] + [self._driver_for(login) for login in self._byor_endpoints]

    # Recovery -----------------------------------------------------------

    async def reconcile(self) -> ReconcileReport:
        """Restore journaled sessions against runtime truth; run before serving.

        Running sessions whose containers survive get their routes back;
        interrupted pipelines fail (builds are not resumable); labeled
        containers with no live session are removed as orphans.
        """
        report = ReconcileReport()
        recovered, byor_map = load_journal(self.journal.path)

        for login, endpoint_dict in byor_map.items():
            if endpoint_dict:
                self._byor_endpoints[login] = RuntimeEndpoint(**endpoint_dict)
            else:
                self._byor_endpoints.pop(login, None)

        found: dict[str, tuple[ContainerHandle, ContainerDriver]] = {}
        for driver in self._all_drivers():
            label = driver.endpoint.label
            try:
                handles = await driver.list_session_containers()
                for handle in handles:
                    sid = await driver.session_label_of(handle.container_id)
                    found[sid] = (handle, driver)
            except RuntimeUnreachable:
                report.unreachable_endpoints.append(label)

        keep: set[str] = set()
        for session_id, record in recovered.items():
            session = Session.from_snapshot(record.snapshot)
            for event_record in record.events:
                _replay_event_fields(session, event_record)
            session.state = record.state
            self.sessions[session_id] = session
            self._locks[session_id] = asyncio.Lock()

            if session.state.terminal:
                continue

            if session.state is SessionState.RUNNING:
                await self._reconcile_running(session, found, report, keep)
            elif session.state in (SessionState.CLONING, SessionState.BUILDING, SessionState.SPAWNING):
                event = {
                    SessionState.CLONING: SessionEvent.CLONE_ERR,
                    SessionState.BUILDING: SessionEvent.BUILD_ERR,
                    SessionState.SPAWNING: SessionEvent.SPAWN_ERR,
                }[session.state]
                await self._apply(
                    session,
                    event,
                    {"stage": "restart", "detail": "hub restarted mid-launch; builds are not resumable"},
                )
                report.failed.append(session_id)
            elif session.state is SessionState.PENDING:
                await self._apply(session, SessionEvent.STOP_REQUESTED, {"requester": "reconcile"})
                await self._apply(session, SessionEvent.STOP_DONE)
                report.stopped.append(session_id)
            elif session.state is SessionState.STOPPING:
                await self._finalize_stop(session)
                report.stopped.append(session_id)

        for sid, (handle, driver) in found.items():
            if sid in keep:
                continue
            try:
                await driver.stop_and_remove(handle)
                report.orphans_removed.append(handle.container_id)
            except DriverError as exc:
                logger.warning("orphan %s could not be removed: %s", handle.container_id, exc)
        return report

    async def _reconcile_running(
        self,
        session: Session,
        found: dict[str, tuple[ContainerHandle, ContainerDriver]],
        report: ReconcileReport,
        keep: set[str],
    ) -> None:
        if session.endpoint_label in report.unreachable_endpoints:
            # Can't tell whether the container survived; keep serving the
            # journaled address and retry on a schedule.
            self._unresolved.add(session.id)
            report.unresolved_sessions.append(session.id)
            if session.container is not None:
                self.routes.register(session.route_path, session.container.host_address, session.id)
            return

        entry = found.get(session.id)
        if entry is not None:
            handle, driver = entry
            handle = await driver.inspect(handle)
            if handle.status == "running":
                address = handle.host_address or (session.container.host_address if session.container else "")
                session.container = ContainerHandle(
                    runtime=handle.runtime,
                    container_id=handle.container_id,
                    host_address=address,
                    status="running",
                )
                session.last_activity_at = self.clock()
                self.routes.register(session.route_path, address, session.id)
                self.journal.append_snapshot(session.id, session.to_snapshot())
                report.restored.append(session.id)
                keep.add(session.id)
                return

        await self._apply(
            session,
            SessionEvent.RUNTIME_LOST,
            {"stage": "runtime", "detail": "container missing or exited after restart"},
        )
        report.failed.append(session.id)

    async def retry_unresolved(self) -> None:
        """Re-check sessions parked on previously unreachable endpoints."""
        for session_id in list(self._unresolved):
            session = self.sessions.get(session_id)
            if session is None or session.state is not SessionState.RUNNING:
                self._unresolved.discard(session_id)
                continue
            driver = self._driver_for_label(session.endpoint_label)
            if session.container is None:
                self._unresolved.discard(session_id)
                continue
            try:
                handle = await driver.inspect(session.container)
            except RuntimeUnreachable:
                continue
            self._unresolved.discard(session_id)
            if handle.status != "running":
                self.routes.unregister(session.route_path)
                await self._apply(
                    session,
                    SessionEvent.RUNTIME_LOST,
                    {"stage": "runtime", "detail": "container lost while endpoint was unreachable"},
                )

    # Background upkeep ----------------------------------------------------

    def start_background_tasks(self, cull_interval: float = 30.0) -> None:
        self._spawn_task(self._upkeep_loop(cull_interval))

    async def _upkeep_loop(self, interval: float) -> None:
        while True:
            await asyncio.sleep(interval)
            try:
                await self.cull_idle()
                await self.retry_unresolved()
                self.log_store.prune()
            except Exception:
                logger.exception("session upkeep iteration failed")

    async def aclose(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        for task in list(self._tasks):
            try:
                await task
            except (asyncio.CancelledError, Exception):
                pass
        for driver in self._byor_drivers.values():
            await driver.close()


def _limit_overrides(memory: int | None, millicores: int | None) -> dict[str, int]:
    overrides: dict[str, int] = {}
    if memory is not None:
        overrides["memory_limit_bytes"] = memory
    if millicores is not None:
        overrides["cpu_quota_millicores"] = millicores
    return overrides


def _replay_event_fields(session: Session, record: JournalRecord) -> None:
    """Mirror _apply's field updates when rebuilding from the journal."""
    payload = record.payload
    event = SessionEvent(record.event)
    if event is SessionEvent.BUILD_OK:
        session.image_tag = payload.get("image_tag", session.image_tag)
    elif event is SessionEvent.SPAWN_OK and payload.get("container"):
        session.container = ContainerHandle(**payload["container"])
    elif event in _ERR_EVENTS:
        session.failure = SessionFailure(
            stage=payload.get("stage", "unknown"), detail=payload.get("detail", "")
        )
    elif event is SessionEvent.STOP_DONE:
        session.container = None
