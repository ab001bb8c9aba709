"""Server-side communicating state machine for FTSM sessions.

States 1-8 belong to a single stream connection up to the point where it
is attached to its session; states 7 and 9-14 belong to the session.  Any
failure moves to state 15.  A reused session walks 14 -> 6 -> 7 -> 9 for
its next transfer.
"""

from __future__ import annotations

import threading
from collections import Counter
from enum import IntEnum


class State(IntEnum):
    ACCEPTED = 1
    SERVICE_SELECTED = 2
    KEY_EXCHANGE = 3
    VERIFIED = 4
    AUTHENTICATED = 5
    PARAMS_RECEIVED = 6
    WAITING = 7
    STREAM_ADDED = 8
    PIOE_START = 9
    SELECT = 10
    STREAM_IO = 11
    STORAGE_IO = 12
    STREAM_RETIRED = 13
    RELEASED = 14
    ERROR = 15


S = State

LEGAL_EDGES: frozenset[tuple[State, State]] = frozenset({
    (S.ACCEPTED, S.SERVICE_SELECTED),
    (S.SERVICE_SELECTED, S.KEY_EXCHANGE),
    (S.KEY_EXCHANGE, S.VERIFIED),
    (S.VERIFIED, S.AUTHENTICATED),
    (S.AUTHENTICATED, S.PARAMS_RECEIVED),
    (S.PARAMS_RECEIVED, S.WAITING),
    (S.PARAMS_RECEIVED, S.STREAM_ADDED),
    (S.STREAM_ADDED, S.WAITING),
    (S.WAITING, S.STREAM_ADDED),
    (S.WAITING, S.PIOE_START),
    (S.PIOE_START, S.SELECT),
    # receive path
    (S.SELECT, S.STREAM_IO),
    (S.STREAM_IO, S.STORAGE_IO),
    (S.STORAGE_IO, S.SELECT),
    (S.STREAM_IO, S.STREAM_RETIRED),
    # send path
    (S.SELECT, S.STORAGE_IO),
    (S.STORAGE_IO, S.STREAM_IO),
    (S.STREAM_IO, S.SELECT),
    (S.SELECT, S.STREAM_RETIRED),
    (S.STREAM_RETIRED, S.SELECT),
    (S.STREAM_RETIRED, S.RELEASED),
    # session reuse
    (S.RELEASED, S.PARAMS_RECEIVED),
}) | frozenset((s, S.ERROR) for s in State if s not in (S.RELEASED, S.ERROR))


class Tracer:
    """Records one machine's walk; keeps edge counts plus a bounded log."""

    MAX_LOG = 10_000

    def __init__(self, kind: str, ident: str = "", start: State | None = None):
        self.kind = kind
        self.ident = ident
        self.state: State | None = None
        self.log: list[State] = []
        self.edges: Counter = Counter()
        self._lock = threading.Lock()
        if start is not None:
            self.enter(start)

    def enter(self, state: int) -> None:
        state = State(state)
        with self._lock:
            if self.state is not None:
                self.edges[(self.state, state)] += 1
            self.state = state
            if len(self.log) < self.MAX_LOG:
                self.log.append(state)

    __call__ = enter

    def illegal_edges(self) -> list[tuple[State, State]]:
        return sorted(e for e in self.edges if e not in LEGAL_EDGES)

    @property
    def failed(self) -> bool:
        return self.state is State.ERROR

    def __repr__(self):
        return f"Tracer({self.kind} {self.ident} -> {self.state!r}, {sum(self.edges.values())} edges)"
