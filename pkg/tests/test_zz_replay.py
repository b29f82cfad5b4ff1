"""Suite-wide journal invariants, run after every other test file.

Every journal any test wrote must replay through the transition function
without a single illegal step, and nothing may ever leave a terminal state.
"""

from __future__ import annotations

from everhub.journal import iter_records
from everhub.state import SessionEvent, SessionState, TERMINAL_STATES, transition

from conftest import JOURNALS


def test_every_journal_produced_by_the_suite_replays_legally():
    journals = [p for p in JOURNALS if p.exists()]
    assert journals, "the suite registered no journals"
    events = 0
    for path in journals:
        states: dict[str, SessionState] = {}
        for record in iter_records(path):
            if record.byor is not None:
                continue
            if record.snapshot is not None:
                states[record.session] = SessionState(record.snapshot["state"])
            elif record.event is not None:
                current = states[record.session]
                assert current not in TERMINAL_STATES, (path, record)
                new_state = transition(current, SessionEvent(record.event))
                assert new_state.value == record.state, (path, record)
                states[record.session] = new_state
                events += 1
    assert events > 0
    print(f"replayed {events} events from {len(journals)} journals with zero illegal transitions")
