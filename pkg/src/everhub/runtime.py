"""Container runtime drivers.

One driver contract, instantiated per runtime endpoint: the shared cluster
and a user-supplied endpoint are the same code path with different
addresses. The production driver speaks the Docker Engine REST API; the
simulated driver runs entirely in memory and supports scripted latencies
and failure injection for lifecycle and recovery tests.
"""

from __future__ import annotations

import asyncio
import io
import itertools
import json
import secrets
import tarfile
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable

import httpx

__all__ = [
    "RuntimeEndpoint",
    "ContainerSpec",
    "ContainerHandle",
    "BuildOutcome",
    "DriverError",
    "RuntimeUnreachable",
    "BuildTimeout",
    "ImageMissing",
    "StartFailed",
    "ContainerDriver",
    "SimulatedDriver",
    "DockerEngineDriver",
    "SESSION_LABEL",
    "DEFAULT_MEMORY_LIMIT",
    "DEFAULT_CPU_MILLICORES",
    "DEFAULT_BUILD_TIMEOUT",
]

SESSION_LABEL = "everhub.session"

DEFAULT_MEMORY_LIMIT = 1 << 30  # 1 GiB
DEFAULT_CPU_MILLICORES = 1000
DEFAULT_BUILD_TIMEOUT = 900.0
DOCKER_API = "/v1.41"

LogSink = Callable[[str], None]


class DriverError(Exception):
    """Base class for runtime driver failures."""


class RuntimeUnreachable(DriverError):
    pass


class BuildTimeout(DriverError):
    pass


class ImageMissing(DriverError):
    pass


class StartFailed(DriverError):
    pass


@dataclass(frozen=True)
class RuntimeEndpoint:
    """Address of a container daemon: a unix socket path or tcp host:port."""

    address: str
    tls_enabled: bool = False
    label: str = "shared-cluster"

    def __post_init__(self) -> None:
        if not self.address:
            raise ValueError("endpoint address is empty")
        if not self.label:
            raise ValueError("endpoint label is empty")

    @property
    def is_unix_socket(self) -> bool:
        return self.address.startswith("/") or self.address.startswith("unix://")

    @property
    def socket_path(self) -> str:
        return self.address[len("unix://"):] if self.address.startswith("unix://") else self.address

    @property
    def tcp_host(self) -> str:
        return self.address.rsplit(":", 1)[0]


@dataclass(frozen=True)
class ContainerSpec:
    """Everything needed to start one session container."""

    image_tag: str
    exposed_port: int = 8888
    memory_limit_bytes: int = DEFAULT_MEMORY_LIMIT
    cpu_quota_millicores: int = DEFAULT_CPU_MILLICORES
    environment_vars: dict[str, str] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 1 <= self.exposed_port <= 65535:
            raise ValueError(f"exposed_port out of range: {self.exposed_port}")
        if self.memory_limit_bytes <= 0:
            raise ValueError("memory_limit_bytes must be positive")
        if SESSION_LABEL not in self.labels:
            raise ValueError(f"container labels must include {SESSION_LABEL!r}")


@dataclass(frozen=True)
class ContainerHandle:
    """Reference to a container on a specific endpoint."""

    runtime: str
    container_id: str
    host_address: str = ""
    status: str = "created"  # created | running | exited | missing

    def __post_init__(self) -> None:
        if not self.container_id and self.status != "missing":
            raise ValueError("container_id required unless status is missing")


@dataclass(frozen=True)
class BuildOutcome:
    success: bool
    detail: str = ""
    timed_out: bool = False


class ContainerDriver(ABC):
    """Uniform lifecycle contract over one runtime endpoint."""

    endpoint: RuntimeEndpoint

    @abstractmethod
    async def build_image(
        self, context: bytes, tag: str, log_sink: LogSink, timeout: float = DEFAULT_BUILD_TIMEOUT
    ) -> BuildOutcome:
        """Build ``tag`` from a tar ``context``, delivering every output line
        to ``log_sink`` in order before the outcome is returned."""

    @abstractmethod
    async def create_and_start(self, spec: ContainerSpec) -> ContainerHandle: ...

    @abstractmethod
    async def stop_and_remove(self, handle: ContainerHandle, grace_seconds: int = 10) -> None: ...

    @abstractmethod
    async def inspect(self, handle: ContainerHandle) -> ContainerHandle: ...

    @abstractmethod
    async def list_session_containers(self) -> list[ContainerHandle]: ...

    @abstractmethod
    async def session_label_of(self, container_id: str) -> str:
        """Session id a container is labeled with, or "" if unlabeled/gone."""

    async def ping(self) -> bool:
        try:
            await self.list_session_containers()
            return True
        except DriverError:
            return False

    async def close(self) -> None:
        return None


def tar_has_root_dockerfile(context: bytes) -> bool:
    try:
        with tarfile.open(fileobj=io.BytesIO(context)) as tar:
            return any(m.name.lstrip("./") == "Dockerfile" for m in tar.getmembers())
    except tarfile.TarError:
        return False


@dataclass
class ScriptedBuild:
    lines: list[str] = field(default_factory=list)
    success: bool = True
    detail: str = ""
    delay_per_line: float = 0.0


@dataclass
class _SimContainer:
    labels: dict[str, str]
    status: str
    host_address: str
    server: asyncio.AbstractServer | None = None


class SimulatedDriver(ContainerDriver):
    """In-memory driver with scripted builds, failure injection, and
    optional real loopback HTTP backends behind each container."""

    _ids = itertools.count(1)

    def __init__(self, endpoint: RuntimeEndpoint | None = None, spawn_backends: bool = False):
        self.endpoint = endpoint or RuntimeEndpoint(address="sim:0", label="simulated")
        self.spawn_backends = spawn_backends
        self.images: set[str] = set()
        self.containers: dict[str, _SimContainer] = {}
        self.unreachable = False
        self.calls: list[tuple] = []
        self._build_scripts: list[ScriptedBuild] = []
        self._fail_once: dict[str, Exception] = {}
        self._delay_once: dict[str, float] = {}
        self._exit_next_start = False

    # Scripting hooks -----------------------------------------------------

    def script_build(self, *, lines: list[str] | None = None, success: bool = True,
                     detail: str = "", delay_per_line: float = 0.0) -> None:
        self._build_scripts.append(ScriptedBuild(list(lines or []), success, detail, delay_per_line))

    def fail_once(self, op: str, exc: Exception) -> None:
        self._fail_once[op] = exc

    def delay_once(self, op: str, seconds: float) -> None:
        self._delay_once[op] = seconds

    def exit_next_start(self) -> None:
        self._exit_next_start = True

    def mark_exited(self, container_id: str) -> None:
        self.containers[container_id].status = "exited"

    def adopt(self, container_id: str, labels: dict[str, str], status: str = "running") -> None:
        """Plant a pre-existing container, e.g. an orphan for recovery tests."""
        self.containers[container_id] = _SimContainer(
            labels=dict(labels), status=status, host_address="127.0.0.1:0"
        )

    # Driver contract ------------------------------------------------------

    async def _gate(self, op: str) -> None:
        if op in self._delay_once:
            await asyncio.sleep(self._delay_once.pop(op))
        if self.unreachable:
            raise RuntimeUnreachable(f"simulated endpoint {self.endpoint.label} is down")
        if op in self._fail_once:
            raise self._fail_once.pop(op)

    async def build_image(self, context: bytes, tag: str, log_sink: LogSink,
                          timeout: float = DEFAULT_BUILD_TIMEOUT) -> BuildOutcome:
        self.calls.append(("build_image", self.endpoint.label, tag))
        await self._gate("build_image")
        script = self._build_scripts.pop(0) if self._build_scripts else None
        if script is None:
            if not tar_has_root_dockerfile(context):
                return BuildOutcome(success=False, detail="no Dockerfile in build context")
            script = ScriptedBuild(lines=[f"Step 1/1 : building {tag}", f"Successfully tagged {tag}"])

        deadline = time.monotonic() + timeout
        for line in script.lines:
            if script.delay_per_line:
                await asyncio.sleep(script.delay_per_line)
            if time.monotonic() > deadline:
                raise BuildTimeout(f"build exceeded {timeout:g}s")
            log_sink(line)
        if script.success:
            self.images.add(tag)
            return BuildOutcome(success=True)
        return BuildOutcome(success=False, detail=script.detail or "scripted build failure")

    async def create_and_start(self, spec: ContainerSpec) -> ContainerHandle:
        self.calls.append(("create_and_start", self.endpoint.label, spec.image_tag))
        await self._gate("create_and_start")
        if spec.image_tag not in self.images:
            raise ImageMissing(f"image {spec.image_tag} not built on {self.endpoint.label}")

        container_id = f"sim{next(self._ids):06d}{secrets.token_hex(3)}"
        server: asyncio.AbstractServer | None = None
        if self.spawn_backends:
            server = await _start_fake_backend(container_id)
            host, port = server.sockets[0].getsockname()[:2]
            host_address = f"{host}:{port}"
        else:
            host_address = f"127.0.0.1:{40000 + len(self.containers)}"

        status = "running"
        if self._exit_next_start:
            self._exit_next_start = False
            status = "exited"
        self.containers[container_id] = _SimContainer(
            labels=dict(spec.labels), status=status, host_address=host_address, server=server
        )
        if status == "exited":
            raise StartFailed(f"container {container_id} exited immediately (exit code 1)")
        return ContainerHandle(runtime=self.endpoint.label, container_id=container_id,
                               host_address=host_address, status="running")

    async def stop_and_remove(self, handle: ContainerHandle, grace_seconds: int = 10) -> None:
        self.calls.append(("stop_and_remove", self.endpoint.label, handle.container_id))
        await self._gate("stop_and_remove")
        sim = self.containers.pop(handle.container_id, None)
        if sim and sim.server:
            sim.server.close()
            await sim.server.wait_closed()

    async def inspect(self, handle: ContainerHandle) -> ContainerHandle:
        await self._gate("inspect")
        sim = self.containers.get(handle.container_id)
        if sim is None:
            return replace(handle, status="missing")
        return replace(handle, status=sim.status, host_address=sim.host_address)

    async def list_session_containers(self) -> list[ContainerHandle]:
        await self._gate("list_session_containers")
        return [
            ContainerHandle(runtime=self.endpoint.label, container_id=cid,
                            host_address=sim.host_address, status=sim.status)
            for cid, sim in self.containers.items()
            if SESSION_LABEL in sim.labels
        ]

    async def session_label_of(self, container_id: str) -> str:
        sim = self.containers.get(container_id)
        return sim.labels.get(SESSION_LABEL, "") if sim else ""

    async def close(self) -> None:
        for sim in self.containers.values():
            if sim.server:
                sim.server.close()


async def _start_fake_backend(container_id: str) -> asyncio.AbstractServer:
    """Tiny loopback HTTP server standing in for the containerized service."""

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            request_line = await reader.readline()
            if not request_line:
                return
            method, path = request_line.decode("latin-1").split(" ")[:2]
            content_length = 0
            while True:
                header = await reader.readline()
                if header in (b"\r\n", b"\n", b""):
                    break
                name, _, value = header.decode("latin-1").partition(":")
                if name.strip().lower() == "content-length":
                    content_length = int(value.strip())
            if content_length:
                await reader.readexactly(content_length)
            body = f"everhub-backend {container_id} {method} {path}".encode()
            writer.write(
                b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: "
                + str(len(body)).encode()
                + b"\r\nConnection: close\r\n\r\n"
                + body
            )
            await writer.drain()
        finally:
            writer.close()

    return await asyncio.start_server(handle, host="127.0.0.1", port=0)


class DockerEngineDriver(ContainerDriver):
    """Driver speaking the Docker Engine REST API over a unix socket or TCP."""

    def __init__(self, endpoint: RuntimeEndpoint, client: httpx.AsyncClient | None = None):
        self.endpoint = endpoint
        if client is not None:
            self._client = client
        elif endpoint.is_unix_socket:
            transport = httpx.AsyncHTTPTransport(uds=endpoint.socket_path)
            self._client = httpx.AsyncClient(transport=transport, base_url="http://docker", timeout=30.0)
        else:
            scheme = "https" if endpoint.tls_enabled else "http"
            self._client = httpx.AsyncClient(base_url=f"{scheme}://{endpoint.address}", timeout=30.0)

    async def close(self) -> None:
        await self._client.aclose()

    async def ping(self) -> bool:
        try:
            resp = await self._client.get("/_ping")
            return resp.status_code == 200
        except httpx.TransportError:
            return False

    async def build_image(self, context: bytes, tag: str, log_sink: LogSink,
                          timeout: float = DEFAULT_BUILD_TIMEOUT) -> BuildOutcome:
        try:
            return await asyncio.wait_for(self._build(context, tag, log_sink), timeout)
        except asyncio.TimeoutError:
            raise BuildTimeout(f"build exceeded {timeout:g}s") from None

    async def _build(self, context: bytes, tag: str, log_sink: LogSink) -> BuildOutcome:
        error_detail = ""
        pending = ""
        try:
            async with self._client.stream(
                "POST",
                f"{DOCKER_API}/build",
                params={"t": tag},
                content=context,
                headers={"Content-Type": "application/x-tar"},
                timeout=httpx.Timeout(30.0, read=None),
            ) as resp:
                if resp.status_code != 200:
                    body = (await resp.aread()).decode(errors="replace")
                    return BuildOutcome(success=False, detail=f"build request rejected: {body.strip()}")
                async for raw_line in resp.aiter_lines():
                    if not raw_line.strip():
                        continue
                    try:
                        msg = json.loads(raw_line)
                    except json.JSONDecodeError:
                        continue
                    if "stream" in msg:
                        pending += msg["stream"]
                        while "\n" in pending:
                            line, pending = pending.split("\n", 1)
                            log_sink(line)
                    if "error" in msg:
                        error_detail = msg.get("error") or str(msg.get("errorDetail", ""))
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc
        if pending:
            log_sink(pending)
        if error_detail:
            return BuildOutcome(success=False, detail=error_detail)
        return BuildOutcome(success=True)

    async def create_and_start(self, spec: ContainerSpec) -> ContainerHandle:
        port_key = f"{spec.exposed_port}/tcp"
        body = {
            "Image": spec.image_tag,
            "Env": [f"{k}={v}" for k, v in spec.environment_vars.items()],
            "Labels": dict(spec.labels),
            "ExposedPorts": {port_key: {}},
            "HostConfig": {
                "PortBindings": {port_key: [{"HostPort": ""}]},
                "Memory": spec.memory_limit_bytes,
                "NanoCpus": spec.cpu_quota_millicores * 1_000_000,
            },
        }
        try:
            resp = await self._client.post(f"{DOCKER_API}/containers/create", json=body)
            if resp.status_code == 404:
                raise ImageMissing(f"image {spec.image_tag} not present on {self.endpoint.label}")
            resp.raise_for_status()
            container_id = resp.json()["Id"]
            start = await self._client.post(f"{DOCKER_API}/containers/{container_id}/start")
            if start.status_code not in (204, 304):
                raise StartFailed(f"start returned {start.status_code}: {start.text.strip()}")
            info = await self._inspect_raw(container_id)
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc
        state = info.get("State", {})
        if not state.get("Running", False):
            raise StartFailed(
                f"container exited immediately (exit code {state.get('ExitCode')}, error {state.get('Error')!r})"
            )
        host_port = ""
        bindings = info.get("NetworkSettings", {}).get("Ports", {}).get(port_key) or []
        if bindings:
            host_port = bindings[0].get("HostPort", "")
        host = "127.0.0.1" if self.endpoint.is_unix_socket else self.endpoint.tcp_host
        return ContainerHandle(runtime=self.endpoint.label, container_id=container_id,
                               host_address=f"{host}:{host_port}", status="running")

    async def stop_and_remove(self, handle: ContainerHandle, grace_seconds: int = 10) -> None:
        try:
            await self._client.post(
                f"{DOCKER_API}/containers/{handle.container_id}/stop",
                params={"t": str(grace_seconds)},
            )
            await self._client.delete(
                f"{DOCKER_API}/containers/{handle.container_id}",
                params={"force": "true"},
            )
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc

    async def inspect(self, handle: ContainerHandle) -> ContainerHandle:
        try:
            info = await self._inspect_raw(handle.container_id)
        except httpx.HTTPStatusError as exc:
            if exc.response.status_code == 404:
                return replace(handle, status="missing")
            raise
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc
        return replace(handle, status=_map_docker_status(info.get("State", {}).get("Status", "")))

    async def _inspect_raw(self, container_id: str) -> dict:
        resp = await self._client.get(f"{DOCKER_API}/containers/{container_id}/json")
        resp.raise_for_status()
        return resp.json()

    async def list_session_containers(self) -> list[ContainerHandle]:
        filters = json.dumps({"label": [SESSION_LABEL]})
        try:
            resp = await self._client.get(
                f"{DOCKER_API}/containers/json",
                params={"all": "true", "filters": filters},
            )
            resp.raise_for_status()
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc
        handles = []
        for entry in resp.json():
            handles.append(
                ContainerHandle(
                    runtime=self.endpoint.label,
                    container_id=entry["Id"],
                    host_address="",
                    status=_map_docker_status(entry.get("State", "")),
                )
            )
        return handles

    async def session_label_of(self, container_id: str) -> str:
        try:
            info = await self._inspect_raw(container_id)
        except httpx.HTTPStatusError:
            return ""
        except httpx.TransportError as exc:
            raise RuntimeUnreachable(f"{self.endpoint.address}: {exc}") from exc
        return (info.get("Config", {}).get("Labels") or {}).get(SESSION_LABEL, "")


def _map_docker_status(status: str) -> str:
    if status in ("exited", "dead", "removing"):
        return "exited"
    if status == "created":
        return "created"
    if not status:
        return "missing"
    return "running"
