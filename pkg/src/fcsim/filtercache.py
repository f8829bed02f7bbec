"""The speculative filter cache (L0).

One instance per thread, for data and again for instructions. Lines carry
dual virtual/physical tags, a valid bit held outside the data array (so a
flush is a one-cycle register clear), a committed bit that gates
write-through to the L1, an origin-level tag driving commit-time prefetch
notifications, and an se flag marking lines that an unprotected system
would have held exclusive. Functionally a valid line is always in shared
state; there is no other coherence state to take.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .addr import LineAddr
from .config import FilterConfig


class Origin(Enum):
    L1 = "L1"
    L2 = "L2"
    MEMORY = "Memory"


class CommitAction(Enum):
    WRITE_THROUGH = "write_through"  # line present and uncommitted
    NONE = "none"                    # line present and already committed
    REFETCH = "refetch"              # line absent, fetch again for the L1


@dataclass
class FilterLine:
    vtag: int
    ptag: int
    valid: bool
    committed: bool
    se_pending: bool
    origin: Origin
    data: int

    @property
    def functional_state(self) -> str:
        return "S" if self.valid else "I"


@dataclass
class FilterCounters:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    fills: int = 0
    evictions: int = 0
    uncommitted_drops: int = 0
    flushes: int = 0
    snoop_invalidations: int = 0

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class CommitOutcome:
    action: CommitAction
    launch_se_upgrade: bool = False
    origin: Origin | None = None


class FilterCache:
    FLUSH_CYCLES = 1

    def __init__(self, name: str, cfg: FilterConfig, allow_se: bool = True,
                 block_uncommitted_eviction: bool = False):
        self.name = name
        self.cfg = cfg
        self.num_sets = cfg.num_sets
        self.ways = cfg.ways
        self.allow_se = allow_se
        self.block_uncommitted_eviction = block_uncommitted_eviction
        self.sets: dict[int, list[FilterLine]] = {}
        self.counters = FilterCounters()

    # Virtual and physical line ids share their in-page low bits, and the
    # set count never exceeds lines-per-page, so either id indexes the set.
    def _set_of(self, line_id: int) -> list[FilterLine]:
        return self.sets.setdefault(line_id % self.num_sets, [])

    # CPU side: virtually indexed, virtually tagged.
    def lookup_cpu(self, vaddr_line: int) -> FilterLine | None:
        self.counters.lookups += 1
        ways = self._set_of(vaddr_line)
        for i, line in enumerate(ways):
            if line.valid and line.vtag == vaddr_line:
                self.counters.hits += 1
                ways.insert(0, ways.pop(i))
                return line
        self.counters.misses += 1
        return None

    def fill(self, line_addr: LineAddr, data: int, origin: Origin,
             speculative: bool = True, se_pending: bool = False) -> FilterLine | None:
        """Installs a line in functional shared state.

        A line with the same physical tag is overwritten in place (the alias
        rule: one copy per physical address). Otherwise an invalid way is
        used, then the LRU victim. With eviction blocking enabled, a set
        whose valid lines are all uncommitted refuses the fill and returns
        None without installing; the caller retries after a commit or
        squash frees a way.
        """
        if se_pending and not self.allow_se:
            se_pending = False
        ways = self._set_of(line_addr.paddr_line)
        for i, line in enumerate(ways):
            if line.valid and line.ptag == line_addr.paddr_line:
                line.vtag = line_addr.vaddr_line
                line.data = data
                line.origin = origin
                line.committed = not speculative
                line.se_pending = se_pending
                ways.insert(0, ways.pop(i))
                self.counters.fills += 1
                return None
        victim_idx = None
        for i, line in enumerate(ways):
            if not line.valid:
                victim_idx = i
                break
        if victim_idx is None and len(ways) < self.ways:
            ways.insert(0, FilterLine(line_addr.vaddr_line, line_addr.paddr_line, True,
                                      not speculative, se_pending, origin, data))
            self.counters.fills += 1
            return None
        if victim_idx is None:
            # evict the LRU line, last in the list
            candidates = range(len(ways) - 1, -1, -1)
            for i in candidates:
                if not self.block_uncommitted_eviction or ways[i].committed:
                    victim_idx = i
                    break
            if victim_idx is None:
                return None  # blocked: every way holds uncommitted data
        victim = ways.pop(victim_idx)
        if victim.valid:
            self.counters.evictions += 1
            if not victim.committed:
                # write-through means nothing is dirty; drop silently
                self.counters.uncommitted_drops += 1
        ways.insert(0, FilterLine(line_addr.vaddr_line, line_addr.paddr_line, True,
                                  not speculative, se_pending, origin, data))
        self.counters.fills += 1
        return victim if victim.valid else None

    def can_fill(self, paddr_line: int) -> bool:
        """True unless eviction blocking leaves no victim for this set."""
        if not self.block_uncommitted_eviction:
            return True
        ways = self._set_of(paddr_line)
        if len(ways) < self.ways:
            return True
        for line in ways:
            if line.valid and line.ptag == paddr_line:
                return True  # alias overwrite
            if not line.valid or line.committed:
                return True
        return False

    def commit_line(self, paddr_line: int) -> CommitOutcome:
        """Commit-time transition for one touched line.

        Present and uncommitted: set the bit, report write-through (plus an
        asynchronous exclusive upgrade for se lines). Present and already
        committed: nothing, zero traffic. Absent: report that the line must
        be fetched again for the L1.
        """
        line = self.snoop(paddr_line)
        if line is None:
            return CommitOutcome(CommitAction.REFETCH)
        if line.committed:
            return CommitOutcome(CommitAction.NONE, origin=line.origin)
        line.committed = True
        launch = line.se_pending
        line.se_pending = False
        return CommitOutcome(CommitAction.WRITE_THROUGH, launch_se_upgrade=launch,
                             origin=line.origin)

    def flush(self) -> int:
        """Clears every valid bit; constant time regardless of occupancy."""
        for ways in self.sets.values():
            for line in ways:
                line.valid = False
                line.se_pending = False
        self.counters.flushes += 1
        return self.FLUSH_CYCLES

    # Memory side: physically indexed, physically tagged.
    def snoop(self, paddr_line: int) -> FilterLine | None:
        for line in self._set_of(paddr_line):
            if line.valid and line.ptag == paddr_line:
                return line
        return None

    def snoop_invalidate(self, paddr_line: int) -> bool:
        line = self.snoop(paddr_line)
        if line is None:
            return False
        line.valid = False
        line.se_pending = False
        self.counters.snoop_invalidations += 1
        return True

    def occupancy(self) -> int:
        return sum(1 for _, ln in self.iter_lines() if ln.valid)

    def iter_lines(self):
        for set_idx in self.sets:
            for line in self.sets[set_idx]:
                yield set_idx, line

    def write_data(self, paddr_line: int, data: int) -> None:
        line = self.snoop(paddr_line)
        if line is not None:
            line.data = data

    def content_snapshot(self) -> list[tuple[int, int, int, bool, bool]]:
        return sorted(
            (s, ln.ptag, ln.vtag, ln.committed, ln.se_pending)
            for s, ln in self.iter_lines()
            if ln.valid
        )
