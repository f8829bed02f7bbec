"""Deterministic discrete-event kernel.

A single global cycle counter drives every component. Events firing at the
same tick dispatch in insertion order (a unique sequence number breaks
ties), so a whole simulation is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
from typing import Callable

from .errors import DeadlockError, PastTickError


class EventHandle:
    """Permits cancellation of a scheduled event before it dispatches."""

    __slots__ = ("fire_at", "seq", "fn", "label", "cancelled")

    def __init__(self, fire_at: int, seq: int, fn: Callable[[], None], label: str):
        self.fire_at = fire_at
        self.seq = seq
        self.fn = fn
        self.label = label
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __repr__(self):  # pragma: no cover - debugging aid
        state = "cancelled" if self.cancelled else "pending"
        return f"<event {self.label!r} @{self.fire_at} seq={self.seq} {state}>"


class Kernel:
    """Global clock plus an ordered event queue."""

    def __init__(self):
        self.now = 0
        self.dispatched = 0
        self._seq = 0
        self._queue: list[tuple[int, int, EventHandle]] = []

    def schedule_at(self, tick: int, fn: Callable[[], None], label: str = "event") -> EventHandle:
        if tick < self.now:
            raise PastTickError(f"cannot schedule {label!r} at {tick}, now is {self.now}")
        handle = EventHandle(tick, self._seq, fn, label)
        self._seq += 1
        heapq.heappush(self._queue, (tick, handle.seq, handle))
        return handle

    def schedule_in(self, delay: int, fn: Callable[[], None], label: str = "event") -> EventHandle:
        return self.schedule_at(self.now + delay, fn, label)

    def has_pending(self) -> bool:
        return any(not h.cancelled for _, _, h in self._queue)

    def _dispatch_next(self) -> None:
        tick, _, handle = heapq.heappop(self._queue)
        if handle.cancelled:
            return
        self.now = tick
        self.dispatched += 1
        handle.fn()

    def run_until(self, tick: int) -> int:
        """Dispatch every event with fire_at <= tick; returns the final tick."""
        if tick < self.now:
            raise PastTickError(f"cannot run backwards to {tick}, now is {self.now}")
        while self._queue and self._queue[0][0] <= tick:
            self._dispatch_next()
        self.now = max(self.now, tick)
        return self.now

    def drain(self, max_events: int = 5_000_000) -> int:
        """Dispatch events until the queue is empty; returns the final tick."""
        budget = max_events
        while self._queue:
            if budget <= 0:
                raise DeadlockError("event budget exhausted, simulation is not quiescing")
            self._dispatch_next()
            budget -= 1
        return self.now

    def step(self) -> bool:
        """Dispatch the single next event. Returns False when the queue is empty."""
        while self._queue:
            if self._queue[0][2].cancelled:
                heapq.heappop(self._queue)
                continue
            self._dispatch_next()
            return True
        return False
