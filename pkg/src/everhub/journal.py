"""Append-only session journal: newline-delimited JSON records.

Two record kinds share the file, in write order:

    {"ts": <unix-millis>, "session": <id>, "event": <name>, "state": <new-state>, "payload": {...}}
    {"ts": <unix-millis>, "session": <id>, "snapshot": {...}}

plus one hub-level kind for user-to-endpoint overrides:

    {"ts": <unix-millis>, "byor": {"login": ..., "endpoint": {...} | null}}

Recovery reads the latest snapshot per session and replays the events that
follow it; every replayed event must be a legal lifecycle transition.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .state import SessionEvent, SessionState

__all__ = ["Journal", "JournalRecord", "RecoveredSession", "load_journal"]


@dataclass(frozen=True)
class JournalRecord:
    ts: int
    session: str | None = None
    event: str | None = None
    state: str | None = None
    payload: dict[str, Any] = field(default_factory=dict)
    snapshot: dict[str, Any] | None = None
    byor: dict[str, Any] | None = None


class Journal:
    """Single-writer append log; every record is flushed on write."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append_event(
        self,
        session_id: str,
        event: SessionEvent,
        state: SessionState,
        payload: dict[str, Any] | None = None,
    ) -> None:
        self._write(
            {
                "ts": _now_millis(),
                "session": session_id,
                "event": event.value,
                "state": state.value,
                "payload": payload or {},
            }
        )

    def append_snapshot(self, session_id: str, snapshot: dict[str, Any]) -> None:
        self._write({"ts": _now_millis(), "session": session_id, "snapshot": snapshot})

    def append_byor(self, login: str, endpoint: dict[str, Any] | None) -> None:
        self._write({"ts": _now_millis(), "byor": {"login": login, "endpoint": endpoint}})

    def _write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _now_millis() -> int:
    return int(time.time() * 1000)


def iter_records(path: Path) -> Iterator[JournalRecord]:
    path = Path(path)
    if not path.exists():
        return
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            yield JournalRecord(
                ts=raw.get("ts", 0),
                session=raw.get("session"),
                event=raw.get("event"),
                state=raw.get("state"),
                payload=raw.get("payload") or {},
                snapshot=raw.get("snapshot"),
                byor=raw.get("byor"),
            )


@dataclass
class RecoveredSession:
    """A session as reconstructed from its snapshot plus later events."""

    snapshot: dict[str, Any]
    state: SessionState
    events: list[JournalRecord] = field(default_factory=list)


def load_journal(path: Path) -> tuple[dict[str, RecoveredSession], dict[str, dict[str, Any] | None]]:
    """Rebuild per-session records and the user-endpoint map from a journal.

    For each session the latest snapshot wins and only events recorded after
    it are replayed on top; the returned state is the last journaled state.
    """
    sessions: dict[str, RecoveredSession] = {}
    byor: dict[str, dict[str, Any] | None] = {}
    for record in iter_records(path):
        if record.byor is not None:
            login = record.byor.get("login", "")
            if login:
                byor[login] = record.byor.get("endpoint")
            continue
        if not record.session:
            continue
        if record.snapshot is not None:
            sessions[record.session] = RecoveredSession(
                snapshot=record.snapshot,
                state=SessionState(record.snapshot["state"]),
            )
        elif record.event is not None:
            recovered = sessions.get(record.session)
            if recovered is None:
                # Event without a prior snapshot: tolerate (truncated file).
                continue
            recovered.events.append(record)
            recovered.state = SessionState(record.state)
    return sessions, byor
