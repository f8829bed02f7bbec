"""Stride prefetcher attached to the shared L2.

Training is stream-keyed per 4 KiB region. Under the defended profiles the
only training input is the commit-time notification channel, so the
prefetcher sees the committed access stream in program order; the
unprotected baseline trains it on demand traffic at the L2 instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addr import LINES_PER_PAGE
from .filtercache import Origin

CONFIDENCE_MAX = 3  # saturating 2-bit counter
CONFIDENCE_THRESHOLD = 2
QUEUE_DEPTH = 8


@dataclass
class StrideEntry:
    key: int
    last_line: int
    stride: int = 0
    confidence: int = 0


@dataclass
class PrefetchNotification:
    paddr_line: int
    level: Origin
    inst_id: int
    thread: int


@dataclass
class PrefetchCounters:
    trained: int = 0
    issued: int = 0
    useful: int = 0
    dropped_notifications: int = 0
    suppressed: int = 0
    queue_drops: int = 0

    def as_dict(self) -> dict:
        return self.__dict__.copy()


class StridePrefetcher:
    def __init__(self):
        self.table: dict[int, StrideEntry] = {}
        self.queue: list[int] = []  # pending prefetch targets awaiting bus issue
        self.in_flight: set[int] = set()
        self.counters = PrefetchCounters()
        self.training_log: list[int] = []

    def train(self, paddr_line: int) -> int | None:
        """Feeds one access; returns a prefetch target when confident."""
        self.counters.trained += 1
        self.training_log.append(paddr_line)
        key = paddr_line // LINES_PER_PAGE
        entry = self.table.get(key)
        if entry is None:
            self.table[key] = StrideEntry(key, paddr_line)
            return None
        stride = paddr_line - entry.last_line
        if stride == 0:
            entry.last_line = paddr_line
            return None
        if stride == entry.stride:
            entry.confidence = min(entry.confidence + 1, CONFIDENCE_MAX)
        else:
            entry.stride = stride
            entry.confidence = 1
        entry.last_line = paddr_line
        if entry.confidence >= CONFIDENCE_THRESHOLD:
            return entry.last_line + entry.stride
        return None

    def enqueue(self, target_line: int) -> bool:
        """Queues a target for issue; dedups against in-flight prefetches."""
        if target_line in self.in_flight or target_line in self.queue:
            return False
        if len(self.queue) >= QUEUE_DEPTH:
            self.queue.pop(0)  # drop-oldest on overflow
            self.counters.queue_drops += 1
        self.queue.append(target_line)
        return True

    def pop_target(self) -> int | None:
        if not self.queue:
            return None
        target = self.queue.pop(0)
        self.in_flight.add(target)
        return target

    def complete(self, target_line: int) -> None:
        self.in_flight.discard(target_line)

    def table_snapshot(self) -> list[tuple[int, int, int, int]]:
        return sorted(
            (e.key, e.last_line, e.stride, e.confidence) for e in self.table.values()
        )
