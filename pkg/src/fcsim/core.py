"""Scripted out-of-order core state: instructions, tokens, per-thread context.

The core issues explicitly scripted memory operations, tracks them through
an in-order commit queue, and squashes on demand. There is no branch
predictor; scenarios and traces state exactly which operations are
speculative and when they are thrown away.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .filtercache import Origin
from .tlb import DomainId


class OpKind(Enum):
    LOAD = "load"
    STORE = "store"
    IFETCH = "ifetch"


class InstState(Enum):
    IN_FLIGHT = "InFlight"
    COMMITTED = "Committed"
    SQUASHED = "Squashed"


class TokenState(Enum):
    PENDING = "pending"
    NACK_PENDING = "nack_pending"
    RESOLVED = "resolved"
    FAULTED = "faulted"
    CANCELLED = "cancelled"


@dataclass
class MemOp:
    kind: OpKind
    vaddr: int
    inst_id: int
    core: int
    thread: int
    domain: DomainId
    value: int | None = None


@dataclass
class AccessToken:
    """Resolves to (latency, data) when the access completes.

    Stores resolve when their line prefetch finishes (which makes the
    instruction commit-eligible) and complete when the exclusive
    acquisition performed at commit is done; loads complete at resolution.
    """

    op: MemOp
    issue_tick: int
    state: TokenState = TokenState.PENDING
    resolve_tick: int | None = None
    complete_tick: int | None = None
    data: int | None = None
    fault: str | None = None
    fault_deferred: bool = False
    hit_level: str | None = None
    components: dict = field(default_factory=dict)

    @property
    def resolved(self) -> bool:
        return self.state in (TokenState.RESOLVED, TokenState.FAULTED)

    @property
    def latency(self) -> int | None:
        if self.resolve_tick is None:
            return None
        return self.resolve_tick - self.issue_tick

    @property
    def completion_latency(self) -> int | None:
        end = self.complete_tick if self.complete_tick is not None else self.resolve_tick
        if end is None:
            return None
        return end - self.issue_tick

    def resolve(self, tick: int, data: int | None, hit_level: str, components: dict) -> None:
        assert self.state in (TokenState.PENDING, TokenState.NACK_PENDING)
        self.state = TokenState.RESOLVED
        self.resolve_tick = tick
        self.complete_tick = tick
        self.data = data
        self.hit_level = hit_level
        self.components = components

    def fault_out(self, tick: int, reason: str) -> None:
        self.state = TokenState.FAULTED
        self.resolve_tick = tick
        self.complete_tick = tick
        self.fault = reason


@dataclass
class TouchedLine:
    paddr_line: int
    vaddr_line: int
    inst_side: bool
    origin: Origin | None = None


@dataclass
class TranslationUse:
    vpage: int
    domain: DomainId
    inst_side: bool
    source: str  # "ftlb", "mtlb" or "walk"


@dataclass
class InstRecord:
    inst_id: int
    op: MemOp
    token: AccessToken
    state: InstState = InstState.IN_FLIGHT
    lines_touched: dict[int, TouchedLine] = field(default_factory=dict)
    translation: TranslationUse | None = None

    def touch_line(self, paddr_line: int, vaddr_line: int, inst_side: bool,
                   origin: Origin | None = None) -> None:
        entry = self.lines_touched.get(paddr_line)
        if entry is None:
            self.lines_touched[paddr_line] = TouchedLine(paddr_line, vaddr_line, inst_side, origin)
        elif origin is not None:
            entry.origin = origin


@dataclass
class StoreBufferEntry:
    inst_id: int
    vaddr_line: int
    value: int


class ThreadCtx:
    """Per-thread architectural and speculation state."""

    def __init__(self, tid: int, core: int, slot: int, domain: DomainId):
        self.tid = tid
        self.core = core
        self.slot = slot
        self.domain = domain
        self.next_inst_id = 1
        self.rob: dict[int, InstRecord] = {}  # insertion order = inst_id order
        self.loads_in_flight = 0
        self.stores_in_flight = 0
        self.spec_markers: list[int] = []
        self.store_buffer: list[StoreBufferEntry] = []
        self.nacked: dict[int, object] = {}  # inst_id -> pending bus miss entry
        self.committed = 0
        self.squashed = 0

    def oldest_in_flight(self) -> InstRecord | None:
        for rec in self.rob.values():
            return rec
        return None

    def find_forward(self, vaddr_line: int) -> StoreBufferEntry | None:
        for entry in reversed(self.store_buffer):
            if entry.vaddr_line == vaddr_line:
                return entry
        return None
