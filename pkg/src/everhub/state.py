"""Session lifecycle state machine.

The launch pipeline is clone, build, spawn, interact, stop; every state
change a session ever makes must come out of :func:`transition`, which makes
the journal replayable and illegal transitions detectable as bugs.
"""

from __future__ import annotations

import enum

__all__ = ["SessionState", "SessionEvent", "IllegalTransition", "transition", "TERMINAL_STATES"]


class SessionState(str, enum.Enum):
    PENDING = "pending"
    CLONING = "cloning"
    BUILDING = "building"
    SPAWNING = "spawning"
    RUNNING = "running"
    STOPPING = "stopping"
    STOPPED = "stopped"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


class SessionEvent(str, enum.Enum):
    BEGIN = "begin"
    CLONE_OK = "clone_ok"
    CLONE_ERR = "clone_err"
    MANIFEST_REJECTED = "manifest_rejected"
    BUILD_OK = "build_ok"
    BUILD_ERR = "build_err"
    SPAWN_OK = "spawn_ok"
    SPAWN_ERR = "spawn_err"
    STOP_REQUESTED = "stop_requested"
    STOP_DONE = "stop_done"
    IDLE_TIMEOUT = "idle_timeout"
    RUNTIME_LOST = "runtime_lost"


TERMINAL_STATES = frozenset({SessionState.STOPPED, SessionState.FAILED})

_TABLE: dict[tuple[SessionState, SessionEvent], SessionState] = {
    (SessionState.PENDING, SessionEvent.BEGIN): SessionState.CLONING,
    (SessionState.CLONING, SessionEvent.CLONE_OK): SessionState.BUILDING,
    (SessionState.CLONING, SessionEvent.CLONE_ERR): SessionState.FAILED,
    (SessionState.BUILDING, SessionEvent.MANIFEST_REJECTED): SessionState.FAILED,
    (SessionState.BUILDING, SessionEvent.BUILD_OK): SessionState.SPAWNING,
    (SessionState.BUILDING, SessionEvent.BUILD_ERR): SessionState.FAILED,
    (SessionState.SPAWNING, SessionEvent.SPAWN_OK): SessionState.RUNNING,
    (SessionState.SPAWNING, SessionEvent.SPAWN_ERR): SessionState.FAILED,
    (SessionState.RUNNING, SessionEvent.IDLE_TIMEOUT): SessionState.STOPPING,
    (SessionState.RUNNING, SessionEvent.RUNTIME_LOST): SessionState.FAILED,
    (SessionState.STOPPING, SessionEvent.STOP_DONE): SessionState.STOPPED,
}

# A stop request is honored from any non-terminal state, including an
# already-stopping session (idempotent convergence).
for _state in SessionState:
    if _state not in TERMINAL_STATES:
        _TABLE[(_state, SessionEvent.STOP_REQUESTED)] = SessionState.STOPPING


class IllegalTransition(Exception):
    """Raised for (state, event) pairs outside the lifecycle table."""

    def __init__(self, state: SessionState, event: SessionEvent):
        super().__init__(f"no transition for {state.value} + {event.value}")
        self.state = state
        self.event = event


def transition(state: SessionState, event: SessionEvent) -> SessionState:
    """Pure total transition function over the lifecycle table."""
    try:
        return _TABLE[(state, event)]
    except KeyError:
        raise IllegalTransition(state, event) from None
