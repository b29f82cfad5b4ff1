"""HTTP surface of the hub: auth routes, session API, proxy mount, UI.

Handlers never block on builds; a launch request enqueues the pipeline
and returns immediately with the session record to poll.
"""

from __future__ import annotations

import logging
import time
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, Callable

import uvicorn
from starlette.applications import Starlette
from starlette.requests import HTTPConnection, Request
from starlette.responses import HTMLResponse, JSONResponse, RedirectResponse, Response
from starlette.routing import Mount, Route
from starlette.staticfiles import StaticFiles

from . import __version__
from .auth import (
    AuthError,
    AuthService,
    BadState,
    ExchangeFailed,
    HttpOAuthProvider,
    Identity,
    LoginNotAllowed,
    StaticProvider,
    TOKEN_LIFETIME_SECONDS,
    TokenSigner,
)
from .builder import BuildLogStore
from .config import HubConfig
from .intake import Fetcher, IntakeError, MalformedUrl, UnsupportedScheme
from .journal import Journal
from .proxy import COOKIE_NAME, RouteTable, SessionProxy
from .runtime import ContainerDriver, DockerEngineDriver, RuntimeEndpoint, SimulatedDriver
from .sessions import Forbidden, QuotaExceeded, Session, SessionManager, SessionNotFound

__all__ = ["Hub", "serve"]

logger = logging.getLogger(__name__)

_LOG_WAIT_CAP = 30.0


class Hub:
    """Wires config, auth, sessions, proxy, and the ASGI app together."""

    def __init__(
        self,
        config: HubConfig,
        *,
        driver: ContainerDriver | None = None,
        fetcher: Fetcher | None = None,
        provider: Any = None,
        clock: Callable[[], float] = time.time,
    ):
        config.validate()
        self.config = config
        self.clock = clock
        self.journal = Journal(Path(config.journal_path))
        self.routes = RouteTable()
        self.log_store = BuildLogStore()

        self.default_driver = driver or self._make_driver(config.default_endpoint())
        signer = TokenSigner(config.secret_key)
        self.auth = AuthService(
            provider or self._make_provider(),
            signer,
            callback_url=f"{config.public_base_url}/hub/oauth_callback",
            allow_list=config.allow_list,
        )
        self.manager = SessionManager(
            journal=self.journal,
            routes=self.routes,
            log_store=self.log_store,
            default_driver=self.default_driver,
            driver_factory=self._make_driver,
            fetcher=fetcher,
            workdir=Path(config.workdir),
            quota=config.quota_policy(),
            fetch_timeout=config.fetch_timeout_seconds,
            build_timeout=config.build_timeout_seconds,
            container_port=config.container_port,
            clock=clock,
        )
        self.proxy = SessionProxy(
            self.routes,
            verify=self._login_for_token,
            is_authorized=self._is_authorized,
            on_activity=self.manager.touch,
        )
        self.api = self._build_api()
        self.asgi = _Dispatcher(self.api, self.proxy)

    # Wiring helpers -------------------------------------------------------

    def _make_driver(self, endpoint: RuntimeEndpoint) -> ContainerDriver:
        if self.config.runtime_driver == "simulated":
            return SimulatedDriver(endpoint, spawn_backends=True)
        return DockerEngineDriver(endpoint)

    def _make_provider(self):
        if self.config.auth_provider == "static":
            return StaticProvider(self.config.static_users)
        return HttpOAuthProvider(
            name=self.config.auth_provider,
            client_id=self.config.client_id,
            client_secret=self.config.client_secret,
            authorize_endpoint=self.config.authorize_endpoint,
            token_endpoint=self.config.token_endpoint,
            user_endpoint=self.config.user_endpoint,
            scope=self.config.oauth_scope,
        )

    def _login_for_token(self, raw_token: str) -> str | None:
        try:
            return self.auth.verify_token(raw_token).login
        except AuthError:
            return None

    def _is_admin(self, login: str) -> bool:
        return login in self.config.admins

    def _is_authorized(self, login: str, session_id: str) -> bool:
        return self.manager.owner_of(session_id) == login or self._is_admin(login)

    def identity_from(self, conn: HTTPConnection) -> Identity | None:
        token = conn.cookies.get(COOKIE_NAME)
        if not token:
            authz = conn.headers.get("authorization", "")
            if authz.lower().startswith("bearer "):
                token = authz[7:].strip()
        if not token:
            return None
        try:
            return self.auth.verify_token(token)
        except AuthError:
            return None

    # Lifecycle ------------------------------------------------------------

    async def startup(self) -> None:
        report = await self.manager.reconcile()
        logger.info(
            "reconcile: restored=%s failed=%s stopped=%s orphans_removed=%s unreachable=%s",
            report.restored,
            report.failed,
            report.stopped,
            report.orphans_removed,
            report.unreachable_endpoints,
        )
        self.manager.start_background_tasks(self.config.cull_interval_seconds)

    async def shutdown(self) -> None:
        # Containers keep running; the next startup reconciles them back in.
        await self.manager.aclose()
        await self.proxy.close()
        await self.default_driver.close()
        provider_close = getattr(self.auth.provider, "close", None)
        if provider_close:
            await provider_close()
        self.journal.close()

    # API ------------------------------------------------------------------

    def _build_api(self) -> Starlette:
        routes = [
            Route("/", self._root),
            Route("/hub/health", self._health),
            Route("/hub/login", self._login),
            Route("/hub/oauth_callback", self._oauth_callback),
            Route("/api/sessions", self._create_session, methods=["POST"]),
            Route("/api/sessions", self._list_sessions, methods=["GET"]),
            Route("/api/sessions/{session_id}", self._get_session, methods=["GET"]),
            Route("/api/sessions/{session_id}", self._delete_session, methods=["DELETE"]),
            Route("/api/sessions/{session_id}/logs", self._session_logs, methods=["GET"]),
            Route("/api/users/{login}/byor", self._put_byor, methods=["PUT"]),
            Route("/api/{rest:path}", self._api_not_found, methods=["GET", "POST", "PUT", "DELETE", "PATCH"]),
        ]
        ui_dir = Path(self.config.ui_dir) if self.config.ui_dir else None
        if ui_dir and ui_dir.is_dir():
            routes.append(Mount("/hub/ui", StaticFiles(directory=ui_dir, html=True)))
        else:
            routes.append(Route("/hub/ui/", self._ui_placeholder))
        @asynccontextmanager
        async def lifespan(app: Starlette):
            await self.startup()
            yield
            await self.shutdown()

        return Starlette(
            routes=routes,
            lifespan=lifespan,
            exception_handlers={_ApiError: _handle_api_error},
        )

    async def _root(self, request: Request) -> Response:
        return RedirectResponse("/hub/ui/", status_code=302)

    async def _health(self, request: Request) -> Response:
        return JSONResponse({"status": "ok", "version": __version__})

    async def _ui_placeholder(self, request: Request) -> Response:
        return HTMLResponse(
            "<html><body><h1>everhub</h1>"
            "<p>No dashboard bundle is installed; the JSON API lives under /api/.</p>"
            "</body></html>"
        )

    async def _login(self, request: Request) -> Response:
        redirect_after = request.query_params.get("next", "/hub/ui/")
        authorize_url, _ = self.auth.begin_login(redirect_after)
        return RedirectResponse(authorize_url, status_code=302)

    async def _oauth_callback(self, request: Request) -> Response:
        code = request.query_params.get("code", "")
        state = request.query_params.get("state", "")
        try:
            identity, token, redirect_after = await self.auth.complete_login(code, state)
        except BadState as exc:
            return _error(400, "bad_state", str(exc))
        except LoginNotAllowed as exc:
            return _error(403, "not_allowed", str(exc))
        except ExchangeFailed as exc:
            return _error(502, "exchange_failed", str(exc))
        response = RedirectResponse(redirect_after or "/hub/ui/", status_code=302)
        response.set_cookie(
            COOKIE_NAME,
            token,
            max_age=TOKEN_LIFETIME_SECONDS,
            httponly=True,
            samesite="lax",
            path="/",
        )
        return response

    async def _create_session(self, request: Request) -> Response:
        identity = self._require_identity(request)
        try:
            body = await request.json()
        except Exception:
            return _error(400, "bad_request", "body must be JSON")
        repo_url = body.get("repo_url", "")
        ref = body.get("ref")
        try:
            session = await self.manager.request_launch(identity.login, repo_url, ref)
        except QuotaExceeded as exc:
            return _error(409, "quota_exceeded", str(exc))
        except (MalformedUrl, UnsupportedScheme) as exc:
            return _error(400, "malformed_url", str(exc))
        except IntakeError as exc:
            return _error(400, "bad_request", str(exc))
        return JSONResponse(
            {"id": session.id, "state": session.state.value, "route_path": session.route_path},
            status_code=202,
        )

    async def _list_sessions(self, request: Request) -> Response:
        identity = self._require_identity(request)
        want_all = request.query_params.get("all") == "1" and self._is_admin(identity.login)
        sessions = self.manager.list_sessions(None if want_all else identity.login)
        return JSONResponse([_summary(s) for s in sessions])

    async def _get_session(self, request: Request) -> Response:
        identity = self._require_identity(request)
        session = self._owned_session(request, identity)
        return JSONResponse(_full(session))

    async def _delete_session(self, request: Request) -> Response:
        identity = self._require_identity(request)
        session = self._owned_session(request, identity)
        if session.state.terminal:
            return JSONResponse({"id": session.id, "state": session.state.value}, status_code=200)
        await self.manager.stop_session(session.id, identity.login, self._is_admin(identity.login))
        return JSONResponse({"id": session.id, "state": session.state.value}, status_code=202)

    async def _session_logs(self, request: Request) -> Response:
        identity = self._require_identity(request)
        session = self._owned_session(request, identity)
        try:
            from_index = int(request.query_params.get("from", "0"))
        except ValueError:
            return _error(400, "bad_request", "from must be an integer")
        wait = min(float(request.query_params.get("wait", "10")), _LOG_WAIT_CAP)

        job = self.log_store.job_for_session(session.id)
        if job is None:
            # No build yet (or never): terminal only if the session is done.
            return JSONResponse(
                {"lines": [], "next_index": from_index, "terminal": session.state.terminal}
            )
        if wait > 0:
            batch = await self.log_store.wait_for_lines(job.id, from_index, timeout=wait)
        else:
            batch = self.log_store.tail_log(job.id, from_index)
        return JSONResponse(
            {
                "lines": [{"index": l.index, "text": l.text, "ts": l.ts} for l in batch.lines],
                "next_index": batch.next_index,
                "terminal": batch.terminal,
            }
        )

    async def _put_byor(self, request: Request) -> Response:
        identity = self._require_identity(request)
        login = request.path_params["login"]
        if not self.config.byor_enabled:
            return _error(409, "disabled", "bring-your-own-resources is disabled on this hub")
        if identity.login != login and not self._is_admin(identity.login):
            return _error(403, "forbidden", "not your endpoint")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "bad_request", "body must be JSON")
        address = body.get("address")
        if address is None:
            await self.manager.set_byor_endpoint(login, None)
            return JSONResponse({"status": "ok", "endpoint": None})
        endpoint = RuntimeEndpoint(
            address=str(address), tls_enabled=bool(body.get("tls", False)), label=f"byor:{login}"
        )
        reachable = await self.manager.set_byor_endpoint(login, endpoint)
        return JSONResponse({"status": "ok", "endpoint": endpoint.address, "reachable": reachable})

    async def _api_not_found(self, request: Request) -> Response:
        self._require_identity(request)
        return _error(404, "not_found", f"no API route {request.url.path}")

    # Helpers ----------------------------------------------------------------

    def _require_identity(self, request: Request) -> Identity:
        identity = self.identity_from(request)
        if identity is None:
            raise _ApiError(401, "unauthenticated", "log in at /hub/login")
        return identity

    def _owned_session(self, request: Request, identity: Identity) -> Session:
        session_id = request.path_params["session_id"]
        try:
            session = self.manager.get(session_id)
        except SessionNotFound:
            raise _ApiError(404, "not_found", f"no session {session_id}") from None
        if session.user_login != identity.login and not self._is_admin(identity.login):
            raise _ApiError(403, "forbidden", "not your session")
        return session


class _ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str):
        super().__init__(detail)
        self.status = status
        self.code = code
        self.detail = detail


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse({"error": code, "detail": detail}, status_code=status)


async def _handle_api_error(request: Request, exc: _ApiError) -> JSONResponse:
    return _error(exc.status, exc.code, exc.detail)


def _summary(session: Session) -> dict[str, Any]:
    return {
        "id": session.id,
        "repo": session.repo.canonical_url,
        "state": session.state.value,
        "route_path": session.route_path,
        "created_at": session.created_at,
        "last_activity_at": session.last_activity_at,
    }


def _full(session: Session) -> dict[str, Any]:
    data = _summary(session)
    data.update(
        {
            "user_login": session.user_login,
            "requested_ref": session.repo.requested_ref,
            "resolved_commit": session.repo.resolved_commit,
            "image_tag": session.image_tag,
            "endpoint": session.endpoint_label,
            "failure": (
                {"stage": session.failure.stage, "detail": session.failure.detail}
                if session.failure
                else None
            ),
        }
    )
    return data


class _Dispatcher:
    """Top-level ASGI app: /user/ goes to the proxy, the rest to the API."""

    def __init__(self, api: Starlette, proxy: SessionProxy):
        self.api = api
        self.proxy = proxy

    async def __call__(self, scope: dict, receive: Callable, send: Callable) -> None:
        if scope["type"] in ("http", "websocket") and scope.get("path", "").startswith("/user/"):
            await self.proxy(scope, receive, send)
            return
        await self.api(scope, receive, send)


def serve(config: HubConfig) -> None:
    """Run the hub until a shutdown signal; reconcile happens on startup."""
    hub = Hub(config)
    uvicorn.run(
        hub.asgi,
        host=config.listen_host,
        port=config.listen_port,
        log_level="info",
        lifespan="on",
    )
