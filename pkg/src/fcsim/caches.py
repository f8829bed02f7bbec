"""Non-speculative set-associative caches with MESI state and LRU replacement."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .config import CacheLevelConfig
from .errors import SpeculativeFillForbiddenError


class Mesi(Enum):
    I = "I"
    S = "S"
    E = "E"
    M = "M"


@dataclass
class NsLine:
    tag: int  # physical line id
    state: Mesi
    data: int = 0
    prefetched: bool = False


@dataclass
class CacheCounters:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    fills: int = 0
    evictions: int = 0
    writebacks: int = 0

    def as_dict(self) -> dict:
        return {
            "lookups": self.lookups,
            "hits": self.hits,
            "misses": self.misses,
            "fills": self.fills,
            "evictions": self.evictions,
            "writebacks": self.writebacks,
        }


class SetAssocCache:
    """One non-speculative cache level.

    Sets are MRU-first lists, allocated lazily. Fills are gated by the
    speculative-fill firewall: when armed, any caller that presents a
    speculative token is rejected. The defended profiles arm it; the
    unprotected baseline does not.
    """

    def __init__(self, name: str, cfg: CacheLevelConfig, firewall: bool = True):
        self.name = name
        self.cfg = cfg
        self.num_sets = cfg.num_sets
        self.ways = cfg.ways
        self.hit_latency = cfg.hit_latency
        self.firewall = firewall
        self.sets: dict[int, list[NsLine]] = {}
        self.counters = CacheCounters()

    def _set_of(self, paddr_line: int) -> list[NsLine]:
        return self.sets.setdefault(paddr_line % self.num_sets, [])

    def _find(self, paddr_line: int) -> NsLine | None:
        for line in self._set_of(paddr_line):
            if line.tag == paddr_line:
                return line
        return None

    def lookup(self, paddr_line: int, touch: bool = True) -> NsLine | None:
        """Demand lookup; counts and (on a hit) refreshes LRU."""
        self.counters.lookups += 1
        line = self._find(paddr_line)
        if line is None:
            self.counters.misses += 1
            return None
        self.counters.hits += 1
        if touch:
            self.touch(paddr_line)
        return line

    def probe(self, paddr_line: int, count: bool = False) -> NsLine | None:
        """Coherence-side peek: no LRU update, so speculative sourcing
        cannot perturb replacement state."""
        if count:
            self.counters.lookups += 1
            line = self._find(paddr_line)
            if line is None:
                self.counters.misses += 1
            else:
                self.counters.hits += 1
            return line
        return self._find(paddr_line)

    def touch(self, paddr_line: int) -> None:
        ways = self._set_of(paddr_line)
        for i, line in enumerate(ways):
            if line.tag == paddr_line:
                ways.insert(0, ways.pop(i))
                return

    def fill(
        self,
        paddr_line: int,
        state: Mesi,
        data: int,
        speculative: bool = False,
        prefetched: bool = False,
    ) -> NsLine | None:
        """Installs or updates a line; returns the evicted victim, if any."""
        if speculative and self.firewall:
            raise SpeculativeFillForbiddenError(
                f"{self.name}: speculative access may not fill a non-speculative cache"
            )
        ways = self._set_of(paddr_line)
        existing = self._find(paddr_line)
        if existing is not None:
            existing.data = data
            existing.state = state
            if prefetched:
                existing.prefetched = True
            self.touch(paddr_line)
            self.counters.fills += 1
            return None
        evicted = None
        if len(ways) >= self.ways:
            evicted = ways.pop()  # LRU victim
            self.counters.evictions += 1
        ways.insert(0, NsLine(paddr_line, state, data, prefetched))
        self.counters.fills += 1
        return evicted

    def invalidate(self, paddr_line: int) -> NsLine | None:
        ways = self._set_of(paddr_line)
        for i, line in enumerate(ways):
            if line.tag == paddr_line:
                return ways.pop(i)
        return None

    def set_state(self, paddr_line: int, state: Mesi) -> None:
        line = self._find(paddr_line)
        assert line is not None, f"{self.name}: no line {paddr_line:#x} to retag"
        line.state = state

    def iter_lines(self):
        for set_idx in self.sets:
            for line in self.sets[set_idx]:
                yield set_idx, line

    def content_snapshot(self) -> list[tuple[int, int, str]]:
        """Tags and states only, sorted; replacement order is excluded on
        purpose (it is compared separately where a test needs it)."""
        return sorted((s, ln.tag, ln.state.value) for s, ln in self.iter_lines())
