"""Image builds with an ordered, replayable log per build job.

One writer (the build task) appends lines; any number of readers tail the
log in bounded batches until the job reaches its single terminal status.
"""

from __future__ import annotations

import asyncio
import io
import secrets
import tarfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .intake import Checkout
from .runtime import BuildTimeout, ContainerDriver, DEFAULT_BUILD_TIMEOUT, RuntimeUnreachable

__all__ = [
    "BuildLine",
    "BuildJob",
    "BuildLogStore",
    "BuildReport",
    "LogBatch",
    "JobNotFound",
    "make_build_archive",
    "run_build",
    "TAIL_BATCH_LIMIT",
]

TAIL_BATCH_LIMIT = 500
LOG_RETENTION_SECONDS = 24 * 3600.0
FAILURE_TAIL_LINES = 20


class JobNotFound(KeyError):
    pass


@dataclass(frozen=True)
class BuildLine:
    index: int
    text: str
    ts: float


@dataclass
class BuildJob:
    id: str
    session_id: str
    tag: str
    lines: list[BuildLine] = field(default_factory=list)
    status: str = "running"  # running | succeeded | failed
    detail: str = ""
    finished_at: float | None = None

    def append_line(self, text: str) -> None:
        if self.status != "running":
            raise RuntimeError(f"build {self.id} already {self.status}")
        self.lines.append(BuildLine(index=len(self.lines), text=text, ts=time.time()))

    def finish(self, status: str, detail: str = "") -> None:
        if self.status != "running":
            raise RuntimeError(f"build {self.id} already {self.status}")
        assert status in ("succeeded", "failed")
        self.status = status
        self.detail = detail
        self.finished_at = time.time()

    @property
    def terminal(self) -> bool:
        return self.status != "running"


@dataclass(frozen=True)
class LogBatch:
    lines: tuple[BuildLine, ...]
    next_index: int
    terminal: bool


class BuildLogStore:
    """Build jobs indexed by job id and by session, with bounded tailing."""

    def __init__(self) -> None:
        self._jobs: dict[str, BuildJob] = {}
        self._by_session: dict[str, str] = {}
        self._changed = asyncio.Event()

    def create_job(self, session_id: str, tag: str) -> BuildJob:
        job = BuildJob(id=secrets.token_hex(8), session_id=session_id, tag=tag)
        self._jobs[job.id] = job
        self._by_session[session_id] = job.id
        return job

    def get(self, job_id: str) -> BuildJob:
        try:
            return self._jobs[job_id]
        except KeyError:
            raise JobNotFound(job_id) from None

    def job_for_session(self, session_id: str) -> BuildJob | None:
        job_id = self._by_session.get(session_id)
        return self._jobs.get(job_id) if job_id else None

    def notify(self) -> None:
        # Wake long-poll waiters; the event is reset before each wait.
        self._changed.set()

    def tail_log(self, job_id: str, from_index: int) -> LogBatch:
        """Lines with index >= from_index, capped at TAIL_BATCH_LIMIT.

        ``terminal`` is only reported true once every line has been
        delivered, so readers looping on next_index never miss a line.
        """
        job = self.get(job_id)
        from_index = max(0, from_index)
        batch = job.lines[from_index : from_index + TAIL_BATCH_LIMIT]
        next_index = from_index + len(batch)
        terminal = job.terminal and next_index >= len(job.lines)
        return LogBatch(lines=tuple(batch), next_index=next_index, terminal=terminal)

    async def wait_for_lines(self, job_id: str, from_index: int, timeout: float = 10.0) -> LogBatch:
        """Long-poll variant of tail_log: hold until data or terminal state."""
        deadline = time.monotonic() + timeout
        while True:
            batch = self.tail_log(job_id, from_index)
            if batch.lines or batch.terminal:
                return batch
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return batch
            self._changed.clear()
            try:
                await asyncio.wait_for(self._changed.wait(), remaining)
            except asyncio.TimeoutError:
                return self.tail_log(job_id, from_index)

    def prune(self, now: float | None = None, retention: float = LOG_RETENTION_SECONDS) -> int:
        """Drop jobs whose terminal state is older than the retention window."""
        now = time.time() if now is None else now
        stale = [
            job_id
            for job_id, job in self._jobs.items()
            if job.finished_at is not None and now - job.finished_at > retention
        ]
        for job_id in stale:
            job = self._jobs.pop(job_id)
            if self._by_session.get(job.session_id) == job_id:
                del self._by_session[job.session_id]
        return len(stale)


def make_build_archive(root: Path) -> bytes:
    """Uncompressed POSIX tar of the checkout tree, paths relative, no .git."""
    root = Path(root)
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for path in sorted(root.rglob("*")):
            rel = path.relative_to(root)
            if ".git" in rel.parts:
                continue
            tar.add(path, arcname=rel.as_posix(), recursive=False)
    return buf.getvalue()


@dataclass(frozen=True)
class BuildReport:
    ok: bool
    tag: str = ""
    stage: str = ""
    detail: str = ""


async def run_build(
    store: BuildLogStore,
    session_id: str,
    checkout: Checkout,
    tag: str,
    driver: ContainerDriver,
    timeout: float = DEFAULT_BUILD_TIMEOUT,
) -> BuildReport:
    """Archive the checkout, stream it to the driver, and record the log.

    Returns a report suitable for a build-ok / build-err session event; a
    failing report carries the last lines of the log as detail.
    """
    job = store.create_job(session_id, tag)

    def sink(line: str) -> None:
        job.append_line(line)
        store.notify()

    try:
        context = await asyncio.to_thread(make_build_archive, checkout.root_path)
        outcome = await driver.build_image(context, tag, sink, timeout=timeout)
    except BuildTimeout as exc:
        job.finish("failed", str(exc))
        store.notify()
        return BuildReport(ok=False, stage="build-timeout", detail=_failure_detail(job, str(exc)))
    except RuntimeUnreachable as exc:
        job.finish("failed", str(exc))
        store.notify()
        return BuildReport(ok=False, stage="runtime", detail=str(exc))

    if outcome.success:
        job.finish("succeeded")
        store.notify()
        return BuildReport(ok=True, tag=tag)
    job.finish("failed", outcome.detail)
    store.notify()
    return BuildReport(ok=False, stage="build", detail=_failure_detail(job, outcome.detail))


def _failure_detail(job: BuildJob, reason: str) -> str:
    tail = [line.text for line in job.lines[-FAILURE_TAIL_LINES:]]
    return "\n".join([reason, *tail]) if tail else reason
