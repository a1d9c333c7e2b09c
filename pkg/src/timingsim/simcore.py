"""
Deterministic discrete-event engine.

Time is an integer count of picoseconds since the simulation epoch. Events
due at the same instant are delivered in the order they were scheduled.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, TextIO

from .codes import ENGINE_CODES, code_name

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

EVENT_LOG_COLUMNS = ("ps", "code", "payload", "source")


class SchedulingError(ValueError):
    """Raised when an event is scheduled before the current time."""


@dataclass(frozen=True)
class TimedEvent:
    at: int
    code: int
    payload: Optional[int] = None
    source: str = ""

    def __post_init__(self):
        if not isinstance(self.at, int):
            raise TypeError(f"event time must be integer ps, got {type(self.at).__name__}")
        if self.code not in ENGINE_CODES:
            raise ValueError(f"unregistered event code 0x{self.code:02X}")

    def log_line(self) -> str:
        payload = "-" if self.payload is None else str(self.payload)
        return f"{self.at}\t{self.code:02X}\t{payload}\t{self.source}"


class EventHandle:
    __slots__ = ("event", "cancelled", "delivered")

    def __init__(self, event: TimedEvent):
        self.event = event
        self.cancelled = False
        self.delivered = False

    def cancel(self) -> bool:
        """Cancel delivery. Returns False if the event was already delivered."""
        if self.delivered:
            return False
        self.cancelled = True
        return True


Handler = Callable[[TimedEvent], None]


class Engine:
    """Single-threaded event queue ordered by (time, insertion sequence)."""

    def __init__(self, start: int = 0, keep_log: bool = True):
        self.now = start
        self._queue: list[tuple[int, int, EventHandle]] = []
        self._seq = itertools.count()
        self._handlers: list[tuple[Optional[frozenset], Handler]] = []
        self.keep_log = keep_log
        self.log: list[TimedEvent] = []
        self.delivered = 0

    def schedule(self, ev: TimedEvent) -> EventHandle:
        if ev.at < self.now:
            raise SchedulingError(
                f"event in past: at={ev.at} ps < now={self.now} ps ({code_name(ev.code)})"
            )
        handle = EventHandle(ev)
        heapq.heappush(self._queue, (ev.at, next(self._seq), handle))
        return handle

    def post(self, at: int, code: int, payload: Optional[int] = None, source: str = "") -> EventHandle:
        return self.schedule(TimedEvent(at, int(code), payload, source))

    def subscribe(self, handler: Handler, codes: Optional[Iterable[int]] = None) -> None:
        """Register a delivery callback, optionally filtered to some codes."""
        self._handlers.append((None if codes is None else frozenset(int(c) for c in codes), handler))

    def pending(self) -> int:
        return sum(1 for _, _, h in self._queue if not h.cancelled)

    def peek_time(self) -> Optional[int]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until(self, t: int) -> int:
        if t < self.now:
            raise SchedulingError(f"run_until({t}) is before now={self.now}")
        count = 0
        queue = self._queue
        while queue and queue[0][0] <= t:
            at, _, handle = heapq.heappop(queue)
            if handle.cancelled:
                continue
            self.now = at
            handle.delivered = True
            ev = handle.event
            if self.keep_log:
                self.log.append(ev)
            for codes, handler in self._handlers:
                if codes is None or ev.code in codes:
                    handler(ev)
            count += 1
        self.now = t
        self.delivered += count
        return count

    def write_log(self, fh: TextIO) -> None:
        fh.write("# " + "\t".join(EVENT_LOG_COLUMNS) + "\n")
        for ev in self.log:
            fh.write(ev.log_line() + "\n")


def read_event_log(lines: Iterable[str]) -> list[TimedEvent]:
    """Parse the tab-separated log written by :meth:`Engine.write_log`."""
    out = []
    for line in lines:
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        ps, code, payload, source = line.split("\t")
        out.append(TimedEvent(int(ps), int(code, 16), None if payload == "-" else int(payload), source))
    return out
