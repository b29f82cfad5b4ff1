"""Dynamic reverse proxy: per-session path prefixes to container backends.

Paths are forwarded unmodified (the containerized server is started with
its base path preconfigured), bodies are streamed without buffering, and
WebSocket upgrades are relayed frame by frame in both directions.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass
from typing import Awaitable, Callable

import httpx
import websockets
from starlette.requests import HTTPConnection
from starlette.websockets import WebSocket, WebSocketDisconnect

__all__ = ["Route", "RouteConflict", "RouteTable", "SessionProxy", "COOKIE_NAME"]

COOKIE_NAME = "everhub_token"

CONNECT_TIMEOUT = 5.0
IDLE_TIMEOUT = 300.0

# Hop-by-hop headers never cross the proxy in either direction.
_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "trailers",
    "transfer-encoding",
    "upgrade",
}


class RouteConflict(Exception):
    pass


@dataclass(frozen=True)
class Route:
    path: str
    backend: str
    session_id: str


class RouteTable:
    """Prefix-disjoint route map; resolution is longest-prefix match."""

    def __init__(self) -> None:
        self._entries: dict[str, Route] = {}

    def register(self, path: str, backend: str, session_id: str) -> None:
        if not path.startswith("/user/") or not path.endswith("/"):
            raise ValueError(f"route path must look like /user/.../: {path!r}")
        for existing in self._entries:
            if existing.startswith(path) or path.startswith(existing):
                raise RouteConflict(f"{path!r} overlaps registered route {existing!r}")
        self._entries[path] = Route(path=path, backend=backend, session_id=session_id)

    def unregister(self, path: str) -> None:
        self._entries.pop(path, None)

    def unregister_session(self, session_id: str) -> None:
        for path in [p for p, r in self._entries.items() if r.session_id == session_id]:
            del self._entries[path]

    def resolve(self, request_path: str) -> Route | None:
        best: Route | None = None
        for path, route in self._entries.items():
            if request_path.startswith(path) and (best is None or len(path) > len(best.path)):
                best = route
        return best

    def paths(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


class SessionProxy:
    """ASGI app forwarding /user/... traffic to the resolved backend.

    Authentication callbacks are injected: ``verify`` maps a raw token to a
    login (or None), ``is_authorized`` decides owner/admin access for a
    session, ``on_activity`` is fired for every forwarded request.
    """

    def __init__(
        self,
        routes: RouteTable,
        verify: Callable[[str], str | None],
        is_authorized: Callable[[str, str], bool],
        on_activity: Callable[[str], None] = lambda session_id: None,
        connect_timeout: float = CONNECT_TIMEOUT,
        idle_timeout: float = IDLE_TIMEOUT,
    ):
        self.routes = routes
        self.verify = verify
        self.is_authorized = is_authorized
        self.on_activity = on_activity
        self._client = httpx.AsyncClient(
            timeout=httpx.Timeout(connect=connect_timeout, read=idle_timeout, write=idle_timeout, pool=connect_timeout),
            follow_redirects=False,
            limits=httpx.Limits(max_connections=200),
        )

    async def close(self) -> None:
        await self._client.aclose()

    async def __call__(self, scope: dict, receive: Callable, send: Callable) -> None:
        if scope["type"] == "http":
            await self._handle_http(scope, receive, send)
        elif scope["type"] == "websocket":
            await self._handle_websocket(scope, receive, send)
        else:
            raise RuntimeError(f"unsupported scope type {scope['type']!r}")

    # HTTP ---------------------------------------------------------------

    async def _handle_http(self, scope: dict, receive: Callable, send: Callable) -> None:
        route = self.routes.resolve(scope["path"])
        if route is None:
            await _send_json(
                send,
                404,
                {"error": "no_route", "hint": "no session here; launch one via POST /api/sessions"},
            )
            return

        login = self._login_from(scope)
        if login is None:
            await _send_json(send, 401, {"error": "unauthenticated"})
            return
        if not self.is_authorized(login, route.session_id):
            await _send_json(send, 403, {"error": "forbidden", "detail": "not your session"})
            return

        self.on_activity(route.session_id)

        raw_path = scope.get("raw_path") or scope["path"].encode()
        if isinstance(raw_path, bytes):
            raw_path = raw_path.decode("latin-1")
        url = f"http://{route.backend}{raw_path}"
        query = scope.get("query_string", b"")
        if query:
            url += "?" + query.decode("latin-1")

        headers = _filter_headers(scope["headers"])
        client = scope.get("client")
        if client:
            headers.append((b"x-forwarded-for", client[0].encode()))
        headers.append((b"x-forwarded-proto", scope.get("scheme", "http").encode()))

        has_body = any(name.lower() in (b"content-length", b"transfer-encoding") for name, _ in scope["headers"])
        request = self._client.build_request(
            scope["method"],
            url,
            headers=headers,
            content=_request_body(receive) if has_body else None,
        )
        try:
            response = await self._client.send(request, stream=True)
        except (httpx.ConnectError, httpx.ConnectTimeout) as exc:
            await _send_json(send, 502, {"error": "bad_gateway", "detail": str(exc)})
            return
        except httpx.TimeoutException as exc:
            await _send_json(send, 504, {"error": "gateway_timeout", "detail": str(exc)})
            return

        try:
            await send(
                {
                    "type": "http.response.start",
                    "status": response.status_code,
                    "headers": [
                        (name, value)
                        for name, value in response.headers.raw
                        if name.decode("latin-1").lower() not in _HOP_BY_HOP
                    ],
                }
            )
            async for chunk in response.aiter_raw():
                await send({"type": "http.response.body", "body": chunk, "more_body": True})
            await send({"type": "http.response.body", "body": b"", "more_body": False})
        except httpx.TimeoutException:
            # Mid-stream timeout: the start frame is out, just end the body.
            await send({"type": "http.response.body", "body": b"", "more_body": False})
        finally:
            await response.aclose()

    def _login_from(self, scope: dict) -> str | None:
        conn = HTTPConnection(scope)
        token = conn.cookies.get(COOKIE_NAME)
        if not token:
            authz = conn.headers.get("authorization", "")
            if authz.lower().startswith("bearer "):
                token = authz[7:].strip()
        if not token:
            return None
        return self.verify(token)

    # WebSocket ----------------------------------------------------------

    async def _handle_websocket(self, scope: dict, receive: Callable, send: Callable) -> None:
        ws = WebSocket(scope, receive=receive, send=send)
        route = self.routes.resolve(scope["path"])
        if route is None:
            await ws.close(code=1008, reason="no route")
            return
        login = self._login_from(scope)
        if login is None or not self.is_authorized(login, route.session_id):
            await ws.close(code=1008, reason="unauthorized")
            return

        self.on_activity(route.session_id)

        raw_path = scope.get("raw_path") or scope["path"].encode()
        if isinstance(raw_path, bytes):
            raw_path = raw_path.decode("latin-1")
        url = f"ws://{route.backend}{raw_path}"
        query = scope.get("query_string", b"")
        if query:
            url += "?" + query.decode("latin-1")

        subprotocols = scope.get("subprotocols") or None
        try:
            backend = await websockets.connect(
                url,
                subprotocols=subprotocols,
                open_timeout=CONNECT_TIMEOUT,
                max_size=None,
            )
        except Exception:
            await ws.close(code=1011, reason="backend unavailable")
            return

        await ws.accept(subprotocol=backend.subprotocol)
        try:
            await asyncio.gather(
                self._relay_client_to_backend(ws, backend, route.session_id),
                self._relay_backend_to_client(ws, backend),
            )
        finally:
            await backend.close()

    async def _relay_client_to_backend(self, ws: WebSocket, backend, session_id: str) -> None:
        try:
            while True:
                message = await ws.receive()
                if message["type"] == "websocket.disconnect":
                    await backend.close()
                    return
                if message.get("text") is not None:
                    self.on_activity(session_id)
                    await backend.send(message["text"])
                elif message.get("bytes") is not None:
                    self.on_activity(session_id)
                    await backend.send(message["bytes"])
        except (WebSocketDisconnect, websockets.ConnectionClosed, RuntimeError):
            await backend.close()

    async def _relay_backend_to_client(self, ws: WebSocket, backend) -> None:
        try:
            async for frame in backend:
                if isinstance(frame, str):
                    await ws.send_text(frame)
                else:
                    await ws.send_bytes(frame)
            close_code = backend.close_code or 1000
            await ws.close(code=close_code if close_code < 5000 else 1000)
        except (WebSocketDisconnect, websockets.ConnectionClosed, RuntimeError):
            pass


def _filter_headers(raw_headers: list[tuple[bytes, bytes]]) -> list[tuple[bytes, bytes]]:
    """Drop hop-by-hop headers, including those named by Connection."""
    dropped = set(_HOP_BY_HOP)
    for name, value in raw_headers:
        if name.lower() == b"connection":
            dropped.update(t.strip().lower() for t in value.decode("latin-1").split(","))
    return [
        (name, value)
        for name, value in raw_headers
        if name.decode("latin-1").lower() not in dropped
    ]


async def _request_body(receive: Callable):
    while True:
        message = await receive()
        if message["type"] == "http.disconnect":
            return
        body = message.get("body", b"")
        if body:
            yield body
        if not message.get("more_body", False):
            return


async def _send_json(send: Callable, status: int, payload: dict) -> None:
    body = json.dumps(payload).encode()
    await send(
        {
            "type": "http.response.start",
            "status": status,
            "headers": [
                (b"content-type", b"application/json"),
                (b"content-length", str(len(body)).encode()),
            ],
        }
    )
    await send({"type": "http.response.body", "body": body})
