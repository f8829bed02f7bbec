"""Address translation: main TLBs, per-thread filter TLBs, synthetic page tables.

The main TLB is non-speculative: it only ever receives translations for
committed instructions (or, in the unprotected baseline, any access).
Speculative misses install into the per-thread filter TLB, which is flushed
on domain switches. A two-level synthetic page table backs the walker: a
root line covering 64 virtual pages and a leaf line packing 8 entries, so
every walk reads exactly two physical lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addr import PAGE_TABLE_BASE_LINE
from .errors import PageFaultError, PermissionFaultError


@dataclass(frozen=True)
class DomainId:
    process: int
    sandbox: int = 0

    def __str__(self) -> str:
        return f"{self.process}:{self.sandbox}"

    @staticmethod
    def parse(text: str) -> "DomainId":
        if ":" in text:
            proc, sandbox = text.split(":", 1)
            return DomainId(int(proc, 0), int(sandbox, 0))
        return DomainId(int(text, 0))


@dataclass(frozen=True)
class Perms:
    read: bool = True
    write: bool = True
    execute: bool = True

    def allows(self, kind: str) -> bool:
        if kind == "load":
            return self.read
        if kind == "store":
            return self.write
        if kind == "ifetch":
            return self.execute
        raise ValueError(f"unknown access kind {kind!r}")


@dataclass
class TlbEntry:
    vpage: int
    ppage: int
    domain: DomainId
    perms: Perms
    committed: bool = True
    walk_lines: tuple | None = None  # physical lines the installing walk read


class FullyAssocTlb:
    """Fully associative, LRU-replaced translation buffer."""

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self.entries: list[TlbEntry] = []  # MRU first
        self.hits = 0
        self.misses = 0

    def lookup(self, domain: DomainId, vpage: int, touch: bool = True) -> TlbEntry | None:
        for i, entry in enumerate(self.entries):
            if entry.domain == domain and entry.vpage == vpage:
                self.hits += 1
                if touch:
                    self.entries.insert(0, self.entries.pop(i))
                return entry
        self.misses += 1
        return None

    def find(self, domain: DomainId, vpage: int) -> TlbEntry | None:
        """Untimed, uncounted probe for commit-path bookkeeping."""
        for entry in self.entries:
            if entry.domain == domain and entry.vpage == vpage:
                return entry
        return None

    def insert(self, entry: TlbEntry) -> TlbEntry | None:
        for i, existing in enumerate(self.entries):
            if existing.domain == entry.domain and existing.vpage == entry.vpage:
                self.entries[i] = entry
                self.entries.insert(0, self.entries.pop(i))
                return None
        evicted = None
        if len(self.entries) >= self.capacity:
            evicted = self.entries.pop()
        self.entries.insert(0, entry)
        return evicted

    def flush(self) -> None:
        self.entries.clear()

    def content_snapshot(self) -> list[tuple[int, int, int, int]]:
        return sorted(
            (e.domain.process, e.domain.sandbox, e.vpage, e.ppage) for e in self.entries
        )


# Leaf lines pack 8 entries (8-byte PTEs in a 64-byte line); root lines
# cover 64 pages each (one pointer per leaf line group).
LEAF_FANOUT = 8
ROOT_FANOUT = 64
_DOMAIN_REGION_LINES = 1 << 28


@dataclass
class PageTables:
    """Per-domain vpage -> (ppage, perms) maps with synthetic walk addresses."""

    auto_identity: bool = True
    maps: dict[DomainId, dict[int, tuple[int, Perms]]] = field(default_factory=dict)
    _domain_index: dict[DomainId, int] = field(default_factory=dict)

    def domain_base_line(self, domain: DomainId) -> int:
        idx = self._domain_index.setdefault(domain, len(self._domain_index))
        return PAGE_TABLE_BASE_LINE + idx * _DOMAIN_REGION_LINES

    def map_page(self, domain: DomainId, vpage: int, ppage: int, perms: Perms = Perms()) -> None:
        self.maps.setdefault(domain, {})[vpage] = (ppage, perms)
        self.domain_base_line(domain)

    def resolve(self, domain: DomainId, vpage: int) -> tuple[int, Perms]:
        table = self.maps.setdefault(domain, {})
        if vpage not in table:
            if not self.auto_identity:
                raise PageFaultError(f"domain {domain}: no mapping for vpage {vpage:#x}")
            table[vpage] = (vpage, Perms())
        return table[vpage]

    def walk_lines(self, domain: DomainId, vpage: int) -> tuple[int, int]:
        """Physical lines read by a hardware walk of this vpage: root, leaf."""
        base = self.domain_base_line(domain)
        root_line = base + (vpage // ROOT_FANOUT)
        leaf_line = base + (_DOMAIN_REGION_LINES // 2) + (vpage // LEAF_FANOUT)
        return root_line, leaf_line

    def check_perms(self, domain: DomainId, vpage: int, kind: str) -> tuple[int, Perms]:
        ppage, perms = self.resolve(domain, vpage)
        if not perms.allows(kind):
            raise PermissionFaultError(
                f"domain {domain}: {kind} denied on vpage {vpage:#x}"
            )
        return ppage, perms
