"""The assembled machine: cores, filter caches, hierarchy, TLBs, bus, prefetcher.

Timing model (serial lookup, the default): a data access spends one cycle
in the per-thread L0 filter cache; translation proceeds in parallel with
that lookup (filter TLB one cycle, main TLB a second cycle, otherwise a
hardware walk whose two reads traverse the data filter cache). On an L0
miss the physically tagged L1 is probed once both the miss and the
translation are known, costing its hit latency; an L1 miss arbitrates onto
the shared bus where the L2 lookup costs its hit latency and memory adds a
fixed constant. With parallel lookup enabled the L1 probe overlaps the L0
cycle instead of following it.

Under the defended profiles a demand miss fills only the filter cache; the
L1 and L2 change only on commit-path traffic (write-through, refetch,
committed stores), coherence responses, writebacks and prefetches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addr import LINE_SHIFT, LineAddr, line_of, page_of
from .caches import Mesi, SetAssocCache
from .coherence import Bus, BusRequest, Grant, MsgKind, Nacked
from .config import RunConfig, profile_config
from .core import (AccessToken, InstRecord, InstState, MemOp, OpKind, StoreBufferEntry,
                   ThreadCtx, TokenState, TranslationUse)
from .errors import (CapacityFullError, DeadlockError, InFlightRemainsError,
                     OutOfOrderCommitError, PageFaultError, PermissionFaultError,
                     ScriptError)
from .filtercache import CommitAction, FilterCache, Origin
from .kernel import Kernel
from .prefetch import PrefetchNotification, StridePrefetcher
from .tlb import DomainId, FullyAssocTlb, PageTables, Perms, TlbEntry

MASK64 = (1 << 64) - 1


def default_memory_value(paddr_line: int) -> int:
    """Deterministic backing-store contents; the value oracle models this too."""
    return paddr_line & MASK64


class FlatMemory:
    def __init__(self):
        self.store: dict[int, int] = {}
        self.reads = 0
        self.writes = 0

    def read(self, paddr_line: int) -> int:
        self.reads += 1
        return self.store.get(paddr_line, default_memory_value(paddr_line))

    def write(self, paddr_line: int, value: int) -> None:
        self.writes += 1
        self.store[paddr_line] = value & MASK64

    def peek(self, paddr_line: int) -> int:
        return self.store.get(paddr_line, default_memory_value(paddr_line))


@dataclass
class _TokenWaiter:
    machine: "Machine"
    thread: ThreadCtx
    rec: InstRecord
    bus_req_tick: int | None = None

    def live(self) -> bool:
        return self.rec.state is InstState.IN_FLIGHT

    def on_nack(self, entry) -> None:
        token = self.rec.token
        if token.state is TokenState.PENDING:
            token.state = TokenState.NACK_PENDING
        self.thread.nacked[self.rec.inst_id] = entry
        self.machine._check_head_retry(self.thread)

    def on_data(self, tick: int, data: int, origin: Origin,
                se_eligible: bool = False, components: dict | None = None) -> None:
        token = self.rec.token
        self.thread.nacked.pop(self.rec.inst_id, None)
        if token.state is TokenState.CANCELLED:
            return
        value = data if self.rec.op.kind is not OpKind.STORE else None
        comp = dict(token.components)
        if components:
            comp.update(components)
        token.resolve(tick, value, origin.value.lower(), comp)
        self.machine._log_access(self.rec)


@dataclass
class _WalkWaiter:
    machine: "Machine"
    thread: ThreadCtx
    rec: InstRecord  # the instruction whose translation is walking
    cont: object     # called with (tick, data)

    def live(self) -> bool:
        return self.rec.state is InstState.IN_FLIGHT

    def on_nack(self, entry) -> None:  # pragma: no cover - page-table lines are never M/E
        self.thread.nacked[self.rec.inst_id] = entry
        self.machine._check_head_retry(self.thread)

    def on_data(self, tick: int, data: int, origin: Origin,
                se_eligible: bool = False, components: dict | None = None) -> None:
        if self.live():
            self.cont(tick)


@dataclass
class _RefetchWaiter:
    """Commit-path fetch that installs a line into the requester's L1."""

    machine: "Machine"
    core: int
    inst_side: bool
    paddr_line: int
    thread: int | None = None

    def live(self) -> bool:
        return True

    def on_nack(self, entry) -> None:  # pragma: no cover - refetches are non-speculative
        raise AssertionError("non-speculative fetch was nacked")

    def on_data(self, tick: int, data: int, origin: Origin,
                se_eligible: bool = False, components: dict | None = None) -> None:
        self.machine.fill_l1(self.core, self.inst_side, self.paddr_line, Mesi.S, data)


class _L0Entry:
    """Outstanding filter-cache miss: coalesces same-line waiters, owns the fill."""

    def __init__(self, machine, thread, side: str, line_addr: LineAddr, ready_tick: int):
        self.m = machine
        self.thread = thread
        self.side = side
        self.line_addr = line_addr
        self.ready_tick = ready_tick
        self.created = machine.kernel.now
        self.waiters: list = []
        self.fill_cancelled = False
        self.blocked = False
        self.payload = None  # (data, origin, se_eligible, components)

    @property
    def key(self):
        return (self.thread.tid, self.side, self.line_addr.paddr_line)

    def live(self) -> bool:
        return any(w.live() for w in self.waiters)

    def start(self) -> None:
        # ready_tick is when the L1 access starts; with parallel lookup that
        # can be one cycle before the L0 miss is known. An MSHR-delayed entry
        # starts at activation instead.
        base = self.ready_tick if self.m.kernel.now == self.created else self.m.kernel.now
        probe_at = max(base + self.m._l1(self.side).hit_latency, self.m.kernel.now)
        self.m.kernel.schedule_at(probe_at, self._probe_l1, "l1-probe")

    def _probe_l1(self) -> None:
        cache = self.m.l1_cache(self.thread.core, self.side)
        line = cache.probe(self.line_addr.paddr_line, count=True)
        if line is not None:
            self._deliver(self.m.kernel.now, line.data, Origin.L1, se_eligible=False,
                          extra={"l1": cache.hit_latency})
            self.m._finish_l0(self)
            return
        self.m._bus_fetch(self, extra={"l1": cache.hit_latency})

    def on_nack(self, l1_entry) -> None:
        for waiter in list(self.waiters):
            if waiter.live():
                waiter.on_nack(l1_entry)

    def on_data(self, tick: int, data: int, origin: Origin, se: bool, extra: dict) -> None:
        self._deliver(tick, data, origin, se, extra)
        if not self.blocked:
            self.m._finish_l0(self)

    def _deliver(self, tick, data, origin, se_eligible, extra) -> None:
        live = [w for w in self.waiters if w.live()]
        if live and not self.fill_cancelled:
            fc = self.m.l0_cache(self.thread.tid, self.side)
            if not fc.can_fill(self.line_addr.paddr_line):
                self.blocked = True
                self.payload = (data, origin, se_eligible, extra)
                return
            se = se_eligible and self.side == "d"
            fc.fill(self.line_addr, data, origin, speculative=True, se_pending=se)
            if self.m.on_l0_fill is not None:
                self.m.on_l0_fill(self.thread, self.side, self.line_addr, data)
        for waiter in live:
            waiter.on_data(tick, data, origin, False, dict(extra))

    def deliver_blocked(self) -> None:
        assert self.blocked and self.payload is not None
        data, origin, se, extra = self.payload
        self.blocked = False
        self._deliver(self.m.kernel.now, data, origin, se, extra)
        if not self.blocked:
            self.m._finish_l0(self)


class _L1Entry:
    """Outstanding L1 miss heading for the bus; may be nacked and retried."""

    QUEUED, ON_BUS, NACK_PENDING, RETRYING, GRANTED = range(5)

    def __init__(self, machine, core: int, side: str, paddr_line: int):
        self.m = machine
        self.core = core
        self.side = side
        self.paddr_line = paddr_line
        self.state = self.QUEUED
        self.waiters: list = []
        self.request: BusRequest | None = None
        self.grant: Grant | None = None
        self.delivery_tick: int | None = None
        self.req_tick: int | None = None

    @property
    def key(self):
        return (self.core, self.side, self.paddr_line)

    def start(self) -> None:
        self._submit(speculative=self.m.protected)

    def _submit(self, speculative: bool) -> None:
        self.state = self.ON_BUS
        self.req_tick = self.m.kernel.now
        refetch = any(isinstance(w, _RefetchWaiter) for w in self.waiters)
        fill_l1 = not self.m.protected or refetch
        # A commit-path data fetch may take the line exclusive when nothing
        # else holds it, exactly as an in-order machine would have; read-only
        # instruction lines stay shared.
        allow_e = fill_l1 and (self.side == "d" or not self.m.protected)
        self.request = BusRequest(
            kind=MsgKind.GETS,
            paddr_line=self.paddr_line,
            core=self.core,
            thread=self._lead_thread(),
            inst_id=None,
            speculative=speculative and not fill_l1,
            inst_side=self.side == "i",
            fill_l1=fill_l1,
            allow_exclusive=allow_e,
            on_done=self._on_done,
        )
        self.m.bus.request(self.request)

    def _lead_thread(self):
        for w in self.waiters:
            if isinstance(w, _L0Bridge):
                return w.l0_entry.thread.tid
            if isinstance(w, _RefetchWaiter) and w.thread is not None:
                return w.thread
        return None

    def add_waiter(self, waiter) -> None:
        self.waiters.append(waiter)
        if isinstance(waiter, _RefetchWaiter):
            # A committed instruction needs this line in the L1; the fetch
            # is non-speculative from here on.
            if self.state in (self.QUEUED, self.ON_BUS) and self.request is not None:
                self.request.speculative = False
                self.request.fill_l1 = True
                self.request.allow_exclusive = self.side == "d" or not self.m.protected
                self.request.thread = self._lead_thread()
            elif self.state is self.NACK_PENDING:
                self.retry()
            elif self.state is self.GRANTED:
                self.m.fill_l1(self.core, self.side == "i", self.paddr_line,
                               Mesi.S, self.grant.data)
        elif self.state is self.NACK_PENDING:
            waiter.on_nack(self)
        elif self.state is self.GRANTED:
            tick = max(self.delivery_tick, self.m.kernel.now)
            grant = self.grant
            self.m.kernel.schedule_at(
                tick, lambda: self._deliver_to(waiter, grant), "late-join")

    def _deliver_to(self, waiter, grant: Grant) -> None:
        if waiter.live():
            waiter.on_data(self.m.kernel.now, grant.data, grant.origin,
                           grant.se_eligible, self._components(grant))

    def _components(self, grant: Grant) -> dict:
        comp = {"bus_wait": grant.grant_tick - self.req_tick}
        l2_lat = self.m.cfg.caches.l2.hit_latency
        if grant.origin is Origin.MEMORY:
            comp["l2"] = l2_lat
            comp["mem"] = grant.latency - l2_lat
        elif grant.origin is Origin.L2:
            comp["l2"] = grant.latency
        else:
            comp["remote_l1"] = grant.latency
        return comp

    def _on_done(self, result) -> None:
        if isinstance(result, Nacked):
            self.state = self.NACK_PENDING
            self.m._release_l1_gate(self)
            for waiter in list(self.waiters):
                waiter.on_nack(self)
            if not any(w.live() for w in self.waiters):
                self.m._drop_l1_entry(self)
            return
        grant: Grant = result
        self.state = self.GRANTED
        self.grant = grant
        self.delivery_tick = self.m.kernel.now
        for waiter in list(self.waiters):
            if isinstance(waiter, _RefetchWaiter):
                if not self.request.fill_l1:
                    waiter.on_data(self.m.kernel.now, grant.data, grant.origin)
            else:
                waiter.on_data(self.m.kernel.now, grant.data, grant.origin,
                               grant.se_eligible, self._components(grant))
        self.m._finish_l1(self)

    def retry(self) -> None:
        """Reissues non-speculatively once a nacked instruction is the
        oldest in flight; such a request always succeeds."""
        if self.state is not self.NACK_PENDING:
            return
        self.state = self.RETRYING
        self.m.bus.counters.retries += 1
        self.m._acquire_l1_gate(self, lambda: self._submit(speculative=False))


class _Gate:
    """MSHR-style concurrency cap with a FIFO backlog."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.active = 0
        self.backlog: list = []

    def acquire(self, start_fn) -> None:
        if self.active < self.capacity:
            self.active += 1
            start_fn()
        else:
            self.backlog.append(start_fn)

    def release(self) -> None:
        self.active -= 1
        if self.backlog and self.active < self.capacity:
            self.active += 1
            self.backlog.pop(0)()


class Machine:
    def __init__(self, cfg: RunConfig, log_events: bool = False, log_protocol: bool = False):
        cfg = profile_config(cfg)
        self.cfg = cfg
        self.protected = cfg.flags.defense != "unprotected"
        self.log_protocol = log_protocol
        self.kernel = Kernel()
        self.memory = FlatMemory()
        self.pagetables = PageTables()
        self.audit_mode = False
        self.on_l0_fill = None  # harness hook (inclusive-L0 test double)

        firewall = self.protected
        self.l1d = [SetAssocCache(f"l1d{c}", cfg.caches.l1d, firewall) for c in range(cfg.cores)]
        self.l1i = [SetAssocCache(f"l1i{c}", cfg.caches.l1i, firewall) for c in range(cfg.cores)]
        self.l2 = SetAssocCache("l2", cfg.caches.l2, firewall)
        self.mtlb_d = [FullyAssocTlb(f"mtlb_d{c}", cfg.tlb.main_entries) for c in range(cfg.cores)]
        self.mtlb_i = [FullyAssocTlb(f"mtlb_i{c}", cfg.tlb.main_entries) for c in range(cfg.cores)]

        self.threads: dict[int, ThreadCtx] = {}
        self.l0d: dict[int, FilterCache] = {}
        self.l0i: dict[int, FilterCache] = {}
        self.ftlb: dict[int, FullyAssocTlb] = {}
        block = cfg.flags.block_uncommitted_eviction
        for core in range(cfg.cores):
            for slot in range(cfg.threads_per_core):
                tid = core * cfg.threads_per_core + slot
                self.threads[tid] = ThreadCtx(tid, core, slot, DomainId(0))
                if self.protected:
                    self.l0d[tid] = FilterCache(f"l0d_t{tid}", cfg.filter, allow_se=True,
                                                block_uncommitted_eviction=block)
                    self.l0i[tid] = FilterCache(f"l0i_t{tid}", cfg.filter, allow_se=False,
                                                block_uncommitted_eviction=block)
                    self.ftlb[tid] = FullyAssocTlb(f"ftlb_t{tid}", cfg.tlb.filter_entries)

        self.prefetcher = StridePrefetcher()
        self.train_prefetcher_on_access = not self.protected
        self.bus = Bus(self)
        self._prefetch_busy = False

        self._l0_pending: dict[tuple, _L0Entry] = {}
        self._l1_pending: dict[tuple, _L1Entry] = {}
        self._l0_gates = {(tid, side): _Gate(cfg.filter.mshrs)
                          for tid in self.threads for side in ("d", "i")}
        self._l1_gates = {(core, "d"): _Gate(cfg.caches.l1d.mshrs) for core in range(cfg.cores)}
        self._l1_gates.update({(core, "i"): _Gate(cfg.caches.l1i.mshrs)
                               for core in range(cfg.cores)})

        self.access_log: list[dict] | None = [] if log_events else None
        self.walks = 0
        self.permission_faults = 0
        self.page_faults = 0
        self.tlb_promotions = 0
        self.domain_switches = 0
        self.notifications = 0
        self.dropped_notifications = 0
        self.forwarded_loads = 0

    # ------------------------------------------------------------- accessors

    @property
    def now(self) -> int:
        return self.kernel.now

    def run_until(self, tick: int) -> int:
        return self.kernel.run_until(tick)

    def drain(self) -> int:
        return self.kernel.drain()

    def l1_cache(self, core: int, side: str) -> SetAssocCache:
        return self.l1d[core] if side == "d" else self.l1i[core]

    def l0_cache(self, tid: int, side: str) -> FilterCache:
        return self.l0d[tid] if side == "d" else self.l0i[tid]

    def _l1(self, side: str):
        return self.cfg.caches.l1d if side == "d" else self.cfg.caches.l1i

    def mtlb(self, core: int, side: str) -> FullyAssocTlb:
        return self.mtlb_d[core] if side == "d" else self.mtlb_i[core]

    def set_domain(self, tid: int, domain: DomainId) -> None:
        """Initial actor placement; not a switch, nothing is flushed."""
        self.threads[tid].domain = domain

    def map_page(self, domain: DomainId, vpage: int, ppage: int, perms: Perms = Perms()) -> None:
        self.pagetables.map_page(domain, vpage, ppage, perms)

    def poke_memory(self, paddr_line: int, value: int) -> None:
        self.memory.write(paddr_line, value)

    def peek_memory(self, paddr_line: int) -> int:
        return self.memory.peek(paddr_line)

    # ----------------------------------------------------------------- issue

    def issue(self, tid: int, kind: OpKind, vaddr: int, value: int | None = None) -> AccessToken:
        th = self.threads[tid]
        if len(th.rob) >= self.cfg.core.rob_entries:
            raise CapacityFullError(f"thread {tid}: reorder buffer full")
        if kind is OpKind.LOAD and th.loads_in_flight >= self.cfg.core.lq_entries:
            raise CapacityFullError(f"thread {tid}: load queue full")
        if kind is OpKind.STORE and th.stores_in_flight >= self.cfg.core.sq_entries:
            raise CapacityFullError(f"thread {tid}: store queue full")

        inst_id = th.next_inst_id
        th.next_inst_id += 1
        op = MemOp(kind, vaddr, inst_id, th.core, tid, th.domain, value)
        token = AccessToken(op, self.kernel.now)
        rec = InstRecord(inst_id, op, token)
        th.rob[inst_id] = rec
        if kind is OpKind.LOAD:
            th.loads_in_flight += 1
        elif kind is OpKind.STORE:
            th.stores_in_flight += 1
            th.store_buffer.append(StoreBufferEntry(inst_id, line_of(vaddr), value & MASK64))
        self._start_access(th, rec)
        return token

    def load(self, tid: int, vaddr: int) -> AccessToken:
        return self.issue(tid, OpKind.LOAD, vaddr)

    def store(self, tid: int, vaddr: int, value: int) -> AccessToken:
        return self.issue(tid, OpKind.STORE, vaddr, value)

    def ifetch(self, tid: int, vaddr: int) -> AccessToken:
        return self.issue(tid, OpKind.IFETCH, vaddr)

    def _start_access(self, th: ThreadCtx, rec: InstRecord) -> None:
        op = rec.op
        side = "i" if op.kind is OpKind.IFETCH else "d"
        if op.kind is OpKind.LOAD:
            fwd = th.find_forward(line_of(op.vaddr))
            if fwd is not None and fwd.inst_id < rec.inst_id:
                self.forwarded_loads += 1
                self.kernel.schedule_in(
                    1,
                    lambda: self._resolve_forward(rec, fwd.value),
                    "store-forward")
                return
        if self.protected:
            self.kernel.schedule_in(1, lambda: self._l0_lookup(th, rec, side), "l0-lookup")
        else:
            self._translate(th, rec, side, base_tick=self.kernel.now,
                            cont=lambda t_ready, la: self._descend_unprotected(th, rec, side, la, t_ready))

    def _resolve_forward(self, rec: InstRecord, value: int) -> None:
        if rec.token.state is TokenState.CANCELLED:
            return
        rec.token.resolve(self.kernel.now, value, "forward", {"forward": 1})
        self._log_access(rec)

    def _l0_lookup(self, th: ThreadCtx, rec: InstRecord, side: str) -> None:
        if rec.token.state is TokenState.CANCELLED:
            return
        fc = self.l0_cache(th.tid, side)
        vline = line_of(rec.op.vaddr)
        line = fc.lookup_cpu(vline)
        if line is not None:
            rec.touch_line(line.ptag, vline, side == "i", line.origin)
            data = line.data if rec.op.kind is not OpKind.STORE else None
            rec.token.resolve(self.kernel.now, data, "l0", {"l0": 1})
            self._log_access(rec)
            return
        self._translate(th, rec, side, base_tick=rec.token.issue_tick,
                        cont=lambda t_ready, la: self._descend(th, rec, side, la, t_ready))

    # ----------------------------------------------------------- translation

    def _translate(self, th: ThreadCtx, rec: InstRecord, side: str, base_tick: int, cont) -> None:
        """Resolves vaddr to a LineAddr, charging filter/main TLB latencies or
        running a two-read page-table walk through the data filter cache."""
        op = rec.op
        vpage = page_of(op.vaddr)
        vline = line_of(op.vaddr)
        kind = op.kind.value

        def finish(t_ready: int, ppage: int, perms: Perms, source: str) -> None:
            rec.translation = TranslationUse(vpage, op.domain, side == "i", source)
            if not perms.allows(kind):
                self.permission_faults += 1
                if self.cfg.flags.permission_check_before_fill:
                    # Checked before any fill: the faulting access leaves no
                    # trace in any cache, filter cache included.
                    self._fault(rec, max(t_ready, self.kernel.now), "permission")
                    return
                rec.token.fault_deferred = True
            line_addr = LineAddr(ppage * (4096 >> LINE_SHIFT) + (vline % (4096 >> LINE_SHIFT)), vline)
            cont(t_ready, line_addr)

        if self.protected:
            entry = self.ftlb[th.tid].lookup(op.domain, vpage)
            if entry is not None:
                finish(base_tick + 1, entry.ppage, entry.perms, "ftlb")
                return
            entry = self.mtlb(th.core, side).lookup(op.domain, vpage, touch=False)
            if entry is not None:
                finish(base_tick + 2, entry.ppage, entry.perms, "mtlb")
                return
            self._walk(th, rec, side, vpage, start_tick=base_tick + 2, finish=finish)
        else:
            entry = self.mtlb(th.core, side).lookup(op.domain, vpage, touch=True)
            if entry is not None:
                finish(base_tick + 1, entry.ppage, entry.perms, "mtlb")
                return
            self._walk(th, rec, side, vpage, start_tick=base_tick + 1, finish=finish)

    def _walk(self, th: ThreadCtx, rec: InstRecord, side: str, vpage: int,
              start_tick: int, finish) -> None:
        op = rec.op
        try:
            ppage, perms = self.pagetables.resolve(op.domain, vpage)
        except PageFaultError:
            self.page_faults += 1
            self._fault(rec, max(start_tick, self.kernel.now), "page_fault")
            return
        self.walks += 1
        root_line, leaf_line = self.pagetables.walk_lines(op.domain, vpage)

        def after_leaf(tick: int) -> None:
            entry = TlbEntry(vpage, ppage, op.domain, perms, committed=not self.protected,
                             walk_lines=(root_line, leaf_line))
            if self.protected:
                # Speculative misses install only into the filter TLB.
                self.ftlb[th.tid].insert(entry)
                finish(tick, ppage, perms, "walk")
            else:
                self.mtlb(th.core, side).insert(entry)
                finish(tick, ppage, perms, "walk")

        def after_root(tick: int) -> None:
            self._walk_read(th, rec, leaf_line, tick, after_leaf)

        self.kernel.schedule_at(max(start_tick, self.kernel.now),
                                lambda: self._walk_read(th, rec, root_line, self.kernel.now, after_root),
                                "walk-start")

    def _walk_read(self, th: ThreadCtx, rec: InstRecord, pt_line: int, start: int, cont) -> None:
        """One page-table read, routed through the data hierarchy (and the
        data filter cache on defended profiles) as a speculative access."""
        line_addr = LineAddr(pt_line, pt_line)
        if not self.protected:
            self._descend_walk_unprotected(th, rec, line_addr, start, cont)
            return

        def lookup():
            fc = self.l0d[th.tid]
            hit = fc.lookup_cpu(pt_line)
            if hit is not None:
                rec.touch_line(pt_line, pt_line, False, hit.origin)
                cont(self.kernel.now)
                return
            rec.touch_line(pt_line, pt_line, False)
            waiter = _WalkWaiter(self, th, rec, cont)
            self._join_l0(th, "d", line_addr, ready_tick=self.kernel.now, waiter=waiter)

        self.kernel.schedule_at(start + 1, lookup, "walk-l0")

    def _descend_walk_unprotected(self, th, rec, line_addr, start, cont) -> None:
        waiter = _WalkWaiter(self, th, rec, cont)
        cache = self.l1d[th.core]
        rec.touch_line(line_addr.paddr_line, line_addr.vaddr_line, False)

        def probe():
            line = cache.lookup(line_addr.paddr_line)
            if line is not None:
                cont(self.kernel.now)
                return
            self._join_l1(th.core, "d", line_addr.paddr_line, waiter)

        self.kernel.schedule_at(start + cache.hit_latency, probe, "walk-l1")

    def _fault(self, rec: InstRecord, tick: int, reason: str) -> None:
        self.kernel.schedule_at(max(tick, self.kernel.now),
                                lambda: self._apply_fault(rec, reason), "fault")

    def _apply_fault(self, rec: InstRecord, reason: str) -> None:
        if rec.token.state is TokenState.CANCELLED:
            return
        rec.token.fault_out(self.kernel.now, reason)
        self._log_access(rec)

    # ------------------------------------------------------------ descending

    def _descend(self, th: ThreadCtx, rec: InstRecord, side: str,
                 line_addr: LineAddr, t_ready: int) -> None:
        """L0 missed; head for the L1 once the translation is ready."""
        issue = rec.token.issue_tick
        if self.cfg.flags.parallel_l0_l1:
            ready = max(issue, t_ready - 1)
        else:
            ready = max(issue + 1, t_ready)
        rec.token.components["l0"] = 1
        wait = ready - (issue + 1)
        if wait > 0:
            rec.token.components["tlb_wait"] = wait
        rec.touch_line(line_addr.paddr_line, line_addr.vaddr_line, side == "i")
        waiter = _TokenWaiter(self, th, rec)
        self._join_l0(th, side, line_addr, ready_tick=ready, waiter=waiter)

    def _descend_unprotected(self, th: ThreadCtx, rec: InstRecord, side: str,
                             line_addr: LineAddr, t_ready: int) -> None:
        issue = rec.token.issue_tick
        ready = max(issue, t_ready - 1)
        wait = ready - issue
        if wait > 0:
            rec.token.components["tlb_wait"] = wait
        rec.touch_line(line_addr.paddr_line, line_addr.vaddr_line, side == "i")
        cache = self.l1_cache(th.core, side)
        waiter = _TokenWaiter(self, th, rec)

        def probe():
            if rec.token.state is TokenState.CANCELLED:
                return
            line = cache.lookup(line_addr.paddr_line)
            if line is not None:
                comp = dict(rec.token.components)
                comp["l1"] = cache.hit_latency
                data = line.data if rec.op.kind is not OpKind.STORE else None
                rec.token.resolve(self.kernel.now, data, "l1", comp)
                self._log_access(rec)
                return
            rec.token.components["l1"] = cache.hit_latency
            self._join_l1(th.core, side, line_addr.paddr_line, waiter)

        self.kernel.schedule_at(ready + cache.hit_latency, probe, "l1-lookup")

    def _join_l0(self, th: ThreadCtx, side: str, line_addr: LineAddr,
                 ready_tick: int, waiter) -> None:
        key = (th.tid, side, line_addr.paddr_line)
        entry = self._l0_pending.get(key)
        if entry is not None:
            entry.waiters.append(waiter)
            return
        entry = _L0Entry(self, th, side, line_addr, ready_tick)
        entry.waiters.append(waiter)
        self._l0_pending[key] = entry
        self._l0_gates[(th.tid, side)].acquire(entry.start)

    def _finish_l0(self, entry: _L0Entry) -> None:
        if self._l0_pending.get(entry.key) is entry:
            del self._l0_pending[entry.key]
            self._l0_gates[(entry.thread.tid, entry.side)].release()

    def _join_l1(self, core: int, side: str, paddr_line: int, waiter) -> None:
        key = (core, side, paddr_line)
        entry = self._l1_pending.get(key)
        if entry is not None:
            entry.add_waiter(waiter)
            return
        entry = _L1Entry(self, core, side, paddr_line)
        entry.waiters.append(waiter)
        self._l1_pending[key] = entry
        self._acquire_l1_gate(entry, entry.start)

    def _bus_fetch(self, l0_entry: _L0Entry, extra: dict) -> None:
        th = l0_entry.thread
        self._join_l1(th.core, l0_entry.side, l0_entry.line_addr.paddr_line,
                      _L0Bridge(self, l0_entry, extra))

    def _acquire_l1_gate(self, entry: _L1Entry, start_fn) -> None:
        self._l1_gates[(entry.core, entry.side)].acquire(start_fn)

    def _release_l1_gate(self, entry: _L1Entry) -> None:
        self._l1_gates[(entry.core, entry.side)].release()

    def _finish_l1(self, entry: _L1Entry) -> None:
        if self._l1_pending.get(entry.key) is entry:
            del self._l1_pending[entry.key]
        self._release_l1_gate(entry)

    def _drop_l1_entry(self, entry: _L1Entry) -> None:
        """Every waiter was squashed while nacked: no retry ever issues."""
        if self._l1_pending.get(entry.key) is entry:
            del self._l1_pending[entry.key]
        for waiter in entry.waiters:
            if isinstance(waiter, _L0Bridge):
                self._finish_l0(waiter.l0_entry)

    # ------------------------------------------------------------------ fills

    def fill_l1(self, core: int, inst_side: bool, paddr_line: int, state: Mesi, data: int) -> None:
        cache = self.l1i[core] if inst_side else self.l1d[core]
        existing = cache.probe(paddr_line)
        if existing is not None:
            existing.data = data
            if state is Mesi.M:
                existing.state = Mesi.M
            cache.touch(paddr_line)
            return
        victim = cache.fill(paddr_line, state, data)
        if victim is not None and victim.state is Mesi.M:
            cache.counters.writebacks += 1
            self._fill_l2_writeback(victim.tag, victim.data)

    def _fill_l2_writeback(self, paddr_line: int, data: int) -> None:
        victim = self.l2.fill(paddr_line, Mesi.M, data)
        if victim is not None and victim.state is Mesi.M:
            self.l2.counters.writebacks += 1
            self.memory.write(victim.tag, victim.data)

    def apply_filter_invalidation(self, paddr_line: int, exclude_thread: int | None) -> None:
        """Constant-time broadcast: clears the line in every other thread's
        filter caches and cancels any in-flight fill of it."""
        for tid in self.threads:
            if tid == exclude_thread or tid not in self.l0d:
                continue
            self.l0d[tid].snoop_invalidate(paddr_line)
            self.l0i[tid].snoop_invalidate(paddr_line)
        for key, entry in list(self._l0_pending.items()):
            if key[2] == paddr_line and key[0] != exclude_thread:
                entry.fill_cancelled = True
                if entry.blocked:
                    entry.deliver_blocked()

    def pump_prefetches(self) -> None:
        if self._prefetch_busy:
            return
        target = self.prefetcher.pop_target()
        if target is None:
            return
        self._prefetch_busy = True
        self.bus.request(BusRequest(
            kind=MsgKind.PREFETCH, paddr_line=target, core=self.cfg.cores,
            thread=None, inst_id=None, speculative=False))

    def prefetch_complete(self) -> None:
        self._prefetch_busy = False

    # ----------------------------------------------------------------- commit

    def commit_next(self, tid: int) -> InstRecord:
        th = self.threads[tid]
        rec = th.oldest_in_flight()
        if rec is None:
            raise ScriptError(f"thread {tid}: nothing to commit")
        self._check_head_retry(th)
        token = rec.token
        while not token.resolved:
            if token.state is TokenState.CANCELLED:
                raise ScriptError(f"thread {tid}: inst {rec.inst_id} was cancelled")
            if not self.kernel.step():
                raise DeadlockError(
                    f"thread {tid}: inst {rec.inst_id} cannot resolve ({token.state.value})")
        if token.state is TokenState.FAULTED or token.fault_deferred:
            raise ScriptError(
                f"thread {tid}: inst {rec.inst_id} faulted ({token.fault or 'deferred permission'})")
        self._do_commit(th, rec)
        return rec

    def commit(self, tid: int, inst_id: int) -> InstRecord:
        th = self.threads[tid]
        oldest = th.oldest_in_flight()
        if oldest is None or oldest.inst_id != inst_id:
            raise OutOfOrderCommitError(
                f"thread {tid}: inst {inst_id} is not the oldest in flight")
        return self.commit_next(tid)

    def commit_to(self, tid: int, inst_id: int) -> None:
        th = self.threads[tid]
        while True:
            oldest = th.oldest_in_flight()
            if oldest is None or oldest.inst_id > inst_id:
                return
            self.commit_next(tid)

    def commit_all(self, tid: int) -> None:
        th = self.threads[tid]
        while th.oldest_in_flight() is not None:
            self.commit_next(tid)

    def _do_commit(self, th: ThreadCtx, rec: InstRecord) -> None:
        rec.state = InstState.COMMITTED
        del th.rob[rec.inst_id]
        th.committed += 1
        op = rec.op
        if op.kind is OpKind.LOAD:
            th.loads_in_flight -= 1
        elif op.kind is OpKind.STORE:
            th.stores_in_flight -= 1
            th.store_buffer = [e for e in th.store_buffer if e.inst_id != rec.inst_id]

        if self.protected:
            self._inject_retranslation_lines(th, rec)
            store_line = line_of(op.vaddr) if op.kind is OpKind.STORE else None
            for touched in list(rec.lines_touched.values()):
                is_store_target = (op.kind is OpKind.STORE
                                   and touched.vaddr_line == store_line
                                   and not touched.inst_side)
                self._commit_line(th, rec, touched, is_store_target)
            self._promote_translation(th, rec)
        elif op.kind is OpKind.STORE:
            self._store_acquire_unprotected(th, rec)

        self._check_head_retry(th)
        self._pump_blocked(th.tid)
        if self.audit_mode:
            self.audit()

    def _commit_line(self, th: ThreadCtx, rec: InstRecord, touched, is_store_target: bool) -> None:
        side = "i" if touched.inst_side else "d"
        fc = self.l0_cache(th.tid, side)
        if is_store_target:
            fc.write_data(touched.paddr_line, rec.op.value & MASK64)
        outcome = fc.commit_line(touched.paddr_line)
        line_addr = LineAddr(touched.paddr_line, touched.vaddr_line)

        if is_store_target:
            self._store_acquire(th, rec, line_addr)
        elif outcome.action is CommitAction.WRITE_THROUGH:
            line = fc.snoop(touched.paddr_line)
            self.bus.record(MsgKind.WRITEBACK_THROUGH, touched.paddr_line, th.core, th.tid, False)
            self.fill_l1(th.core, touched.inst_side, touched.paddr_line, Mesi.S, line.data)
            if outcome.launch_se_upgrade:
                self.bus.counters.se_launched += 1
                self.bus.request(BusRequest(
                    kind=MsgKind.SE_UPGRADE, paddr_line=touched.paddr_line, core=th.core,
                    thread=th.tid, inst_id=rec.inst_id, speculative=False))
        elif outcome.action is CommitAction.REFETCH:
            # The line left the L0 before commit; an in-order run would have
            # cached it, so fetch it again for the L1. Commit does not stall
            # and the L0 is not refilled.
            own = self.l1_cache(th.core, side).probe(touched.paddr_line)
            if own is None:
                waiter = _RefetchWaiter(self, th.core, touched.inst_side,
                                        touched.paddr_line, th.tid)
                self._join_l1(th.core, side, touched.paddr_line, waiter)
            else:
                self.l1_cache(th.core, side).touch(touched.paddr_line)

        if outcome.action is not CommitAction.NONE:
            origin = outcome.origin if outcome.origin is not None else touched.origin
            self._notify_commit(PrefetchNotification(
                touched.paddr_line, origin, rec.inst_id, th.tid))

    def _store_acquire(self, th: ThreadCtx, rec: InstRecord, line_addr: LineAddr) -> None:
        """Exclusive acquisition and write-through for a committed store."""
        value = rec.op.value & MASK64
        own = self.l1d[th.core].probe(line_addr.paddr_line)
        if own is not None and own.state in (Mesi.E, Mesi.M):
            if own.state is Mesi.E:
                self.bus.counters.silent_upgrades += 1
            own.state = Mesi.M
            own.data = value
            self.l1d[th.core].touch(line_addr.paddr_line)
            rec.token.complete_tick = self.kernel.now + 1
            return

        def done(result: Grant) -> None:
            rec.token.complete_tick = self.kernel.now

        self.bus.request(BusRequest(
            kind=MsgKind.GETX, paddr_line=line_addr.paddr_line, core=th.core,
            thread=th.tid, inst_id=rec.inst_id, speculative=False,
            store_value=value, on_done=done))

    def _store_acquire_unprotected(self, th: ThreadCtx, rec: InstRecord) -> None:
        vline = line_of(rec.op.vaddr)
        touched = None
        for t in rec.lines_touched.values():
            if t.vaddr_line == vline and not t.inst_side:
                touched = t
                break
        if touched is None:
            return
        self._store_acquire(th, rec, LineAddr(touched.paddr_line, touched.vaddr_line))

    def _notify_commit(self, note: PrefetchNotification) -> None:
        """Commit-time prefetch channel: the only training input on the
        defended profiles. Notifications for lines sourced from the L1 are
        dropped; L2- and memory-sourced lines both passed through the L2,
        whose prefetcher is the only one attached."""
        self.notifications += 1
        if note.level is None or note.level is Origin.L1:
            self.dropped_notifications += 1
            return
        target = self.prefetcher.train(note.paddr_line)
        if target is not None and self.prefetcher.enqueue(target):
            self.pump_prefetches()

    def _inject_retranslation_lines(self, th: ThreadCtx, rec: InstRecord) -> None:
        """A translation served by a still-speculative filter-TLB entry was a
        page-table miss as far as committed execution is concerned: the
        commit-time retranslation externalizes the walk's lines exactly as if
        this instruction had walked itself."""
        tr = rec.translation
        if tr is None or tr.source not in ("ftlb", "walk"):
            return
        entry = self.ftlb[th.tid].find(tr.domain, tr.vpage)
        if entry is None or entry.committed or not entry.walk_lines:
            return
        for line in entry.walk_lines:
            if line not in rec.lines_touched:
                l0_line = self.l0d[th.tid].snoop(line)
                origin = l0_line.origin if l0_line is not None else Origin.MEMORY
                rec.touch_line(line, line, False, origin)

    def _promote_translation(self, th: ThreadCtx, rec: InstRecord) -> None:
        tr = rec.translation
        if tr is None or not self.protected:
            return
        side = "i" if tr.inst_side else "d"
        if tr.source == "mtlb":
            self.mtlb(th.core, side).lookup(tr.domain, tr.vpage, touch=True)
            return
        entry = self.ftlb[th.tid].find(tr.domain, tr.vpage)
        if entry is None:
            return
        entry.committed = True
        self.tlb_promotions += 1
        self.mtlb(th.core, side).insert(
            TlbEntry(entry.vpage, entry.ppage, entry.domain, entry.perms, committed=True))

    def _check_head_retry(self, th: ThreadCtx) -> None:
        rec = th.oldest_in_flight()
        if rec is None:
            return
        entry = th.nacked.get(rec.inst_id)
        if entry is not None:
            entry.retry()

    def _pump_blocked(self, tid: int) -> None:
        for key, entry in list(self._l0_pending.items()):
            if key[0] != tid or not entry.blocked:
                continue
            if not entry.live():
                entry.blocked = False
                self._finish_l0(entry)
            elif entry.fill_cancelled or self.l0_cache(tid, entry.side).can_fill(key[2]):
                entry.deliver_blocked()

    # ----------------------------------------------------------------- squash

    def spec_begin(self, tid: int) -> int:
        th = self.threads[tid]
        marker = th.next_inst_id - 1
        th.spec_markers.append(marker)
        return marker

    def squash(self, tid: int) -> None:
        """Squashes back to the most recent speculation marker (or all)."""
        th = self.threads[tid]
        marker = th.spec_markers.pop() if th.spec_markers else 0
        self.squash_after(tid, marker)

    def squash_after(self, tid: int, after_inst_id: int) -> None:
        th = self.threads[tid]
        doomed = [rec for rec in th.rob.values() if rec.inst_id > after_inst_id]
        for rec in reversed(doomed):
            rec.state = InstState.SQUASHED
            th.squashed += 1
            if not rec.token.resolved:
                rec.token.state = TokenState.CANCELLED
            del th.rob[rec.inst_id]
            if rec.op.kind is OpKind.LOAD:
                th.loads_in_flight -= 1
            elif rec.op.kind is OpKind.STORE:
                th.stores_in_flight -= 1
                th.store_buffer = [e for e in th.store_buffer if e.inst_id != rec.inst_id]
            entry = th.nacked.pop(rec.inst_id, None)
            if entry is not None and entry.state is _L1Entry.NACK_PENDING:
                if not any(w.live() for w in entry.waiters):
                    self._drop_l1_entry(entry)
        th.spec_markers = [m for m in th.spec_markers if m <= after_inst_id]
        if self.cfg.flags.clear_on_misspeculate and self.protected and doomed:
            self.l0d[tid].flush()
            self.l0i[tid].flush()
            self.ftlb[tid].flush()
        self._pump_blocked(tid)
        self._check_head_retry(th)

    # ---------------------------------------------------------- domain switch

    def domain_switch(self, tid: int, domain: DomainId, cause: str = "ctx") -> None:
        """Flushes the thread's filter structures in one cycle and moves it
        to a new protection domain. The pipeline must be drained first."""
        if cause not in ("ctx", "syscall", "sandbox"):
            raise ScriptError(f"unknown domain-switch cause {cause!r}")
        th = self.threads[tid]
        if th.rob:
            raise InFlightRemainsError(
                f"thread {tid}: {len(th.rob)} instructions in flight at domain switch")
        th.spec_markers.clear()

        def do_flush():
            if self.protected:
                self.l0d[tid].flush()
                self.l0i[tid].flush()
                self.ftlb[tid].flush()
            th.domain = domain

        self.kernel.schedule_in(1, do_flush, "domain-switch")
        self.kernel.run_until(self.kernel.now + 1)
        self.domain_switches += 1

    # ------------------------------------------------------------------ waits

    def wait(self, token: AccessToken) -> AccessToken:
        while not token.resolved:
            if token.state is TokenState.CANCELLED:
                raise ScriptError("waiting on a cancelled access")
            if not self.kernel.step():
                raise DeadlockError(f"access cannot resolve ({token.state.value})")
        return token

    def wait_complete(self, token: AccessToken) -> AccessToken:
        """Waits until the access has fully externalized (for stores, until
        the commit-time exclusive acquisition finished)."""
        self.wait(token)
        while token.complete_tick is None:
            if not self.kernel.step():
                raise DeadlockError("store acquisition cannot complete")
        self.kernel.run_until(max(self.kernel.now, token.complete_tick))
        return token

    def warm_translation(self, tid: int, vaddr: int, side: str = "d",
                         domain: DomainId | None = None) -> None:
        """Scenario setup helper: pre-installs a main-TLB entry, untimed."""
        th = self.threads[tid]
        dom = domain if domain is not None else th.domain
        ppage, perms = self.pagetables.resolve(dom, page_of(vaddr))
        self.mtlb(th.core, side).insert(TlbEntry(page_of(vaddr), ppage, dom, perms, True))

    def barrier(self) -> int:
        """Drains all scheduled work; outstanding nacked accesses stay pending."""
        return self.kernel.drain()

    # -------------------------------------------------------------- test hook

    def force_l1_fill(self, core: int, inst_side: bool, paddr_line: int,
                      state: Mesi = Mesi.S, data: int = 0) -> None:
        """Privileged backdoor for harness test doubles; not a machine path."""
        self.fill_l1(core, inst_side, paddr_line, state, data)

    # ------------------------------------------------------------------ audit

    def audit(self) -> None:
        owners: dict[int, list[str]] = {}
        caches = [*self.l1d, *self.l1i, self.l2]
        for cache in caches:
            for _, line in cache.iter_lines():
                if line.state in (Mesi.E, Mesi.M):
                    owners.setdefault(line.tag, []).append(cache.name)
        for tag, who in owners.items():
            assert len(who) == 1, f"line {tag:#x} owned exclusively by {who}"
        for tid, th in self.threads.items():
            if tid not in self.l0d:
                continue
            for fc in (self.l0d[tid], self.l0i[tid]):
                for _, line in fc.iter_lines():
                    if not line.valid:
                        continue
                    assert line.functional_state == "S"
                    assert not (line.se_pending and line.committed)
                    for core in range(self.cfg.cores):
                        if core == th.core:
                            continue
                        for cache in (self.l1d[core], self.l1i[core]):
                            found = cache.probe(line.ptag)
                            assert found is None or found.state not in (Mesi.E, Mesi.M), (
                                f"filter copy of {line.ptag:#x} coexists with remote {found.state}"
                            )

    # -------------------------------------------------------------- reporting

    def _log_access(self, rec: InstRecord) -> None:
        if self.access_log is None:
            return
        token = rec.token
        self.access_log.append({
            "inst_id": rec.inst_id,
            "thread": rec.op.thread,
            "kind": rec.op.kind.value,
            "vaddr": rec.op.vaddr,
            "issue_tick": token.issue_tick,
            "resolve_tick": token.resolve_tick,
            "latency": token.latency,
            "hit_level": token.hit_level,
            "fault": token.fault,
            "components": dict(sorted(token.components.items())),
        })

    def ns_state_snapshot(self) -> dict:
        snap = {"l2": self.l2.content_snapshot(),
                "prefetcher": self.prefetcher.table_snapshot()}
        for core in range(self.cfg.cores):
            snap[f"l1d{core}"] = self.l1d[core].content_snapshot()
            snap[f"l1i{core}"] = self.l1i[core].content_snapshot()
            snap[f"mtlb_d{core}"] = self.mtlb_d[core].content_snapshot()
            snap[f"mtlb_i{core}"] = self.mtlb_i[core].content_snapshot()
        return snap

    def stats_snapshot(self) -> dict:
        def agg(counter_dicts):
            out: dict[str, int] = {}
            for d in counter_dicts:
                for k, v in d.items():
                    out[k] = out.get(k, 0) + v
            return out

        caches = {
            "l1d": agg([c.counters.as_dict() for c in self.l1d]),
            "l1i": agg([c.counters.as_dict() for c in self.l1i]),
            "l2": self.l2.counters.as_dict(),
        }
        filter_stats = {}
        if self.protected:
            for tid in sorted(self.l0d):
                filter_stats[f"t{tid}"] = {
                    "l0d": self.l0d[tid].counters.as_dict(),
                    "l0i": self.l0i[tid].counters.as_dict(),
                }
            caches["l0d"] = agg([self.l0d[t].counters.as_dict() for t in self.l0d])
            caches["l0i"] = agg([self.l0i[t].counters.as_dict() for t in self.l0i])
        threads = {
            f"t{tid}": {
                "issued": th.next_inst_id - 1,
                "committed": th.committed,
                "squashed": th.squashed,
            }
            for tid, th in sorted(self.threads.items())
        }
        tlb = {
            "ftlb_hits": sum(t.hits for t in self.ftlb.values()),
            "ftlb_misses": sum(t.misses for t in self.ftlb.values()),
            "mtlb_hits": sum(t.hits for t in [*self.mtlb_d, *self.mtlb_i]),
            "mtlb_misses": sum(t.misses for t in [*self.mtlb_d, *self.mtlb_i]),
            "walks": self.walks,
            "promotions": self.tlb_promotions,
            "permission_faults": self.permission_faults,
            "page_faults": self.page_faults,
        }
        return {
            "ticks": self.kernel.now,
            "caches": caches,
            "filter_caches": filter_stats,
            "coherence": self.bus.counters.as_dict(),
            "prefetch": self.prefetcher.counters.as_dict(),
            "tlb": tlb,
            "threads": threads,
            "domain_switches": self.domain_switches,
            "forwarded_loads": self.forwarded_loads,
            "notifications": {
                "sent": self.notifications,
                "dropped": self.dropped_notifications,
            },
        }


class _L0Bridge:
    """Adapts an L0 miss entry to the L1 entry's waiter interface."""

    def __init__(self, machine, l0_entry: _L0Entry, extra: dict):
        self.m = machine
        self.l0_entry = l0_entry
        self.extra = extra

    def live(self) -> bool:
        return self.l0_entry.live()

    def on_nack(self, l1_entry) -> None:
        self.l0_entry.on_nack(l1_entry)

    def on_data(self, tick, data, origin, se_eligible, components) -> None:
        merged = dict(self.extra)
        merged.update(components)
        self.l0_entry.on_data(tick, data, origin, se_eligible, merged)
