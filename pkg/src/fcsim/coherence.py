"""Snooping MESI bus with the three filter-cache protocol extensions.

Rules enforced here, on top of plain MESI over the non-speculative caches:

* Filter caches are granted data only in shared state, and only when no
  remote private cache holds the line modified or exclusive. A speculative
  request that would downgrade a remote private M/E line is negatively
  acknowledged instead; the owner is untouched and the requester retries
  once its instruction is the oldest in flight.
* Exclusive or modified acquisitions (committed stores, and the
  asynchronous shared-to-exclusive upgrade launched at commit) broadcast an
  invalidation to every other thread's filter caches, in constant time, so
  the contents of a filter cache are never observable through protocol
  timing. The broadcast is suppressed when the requester's L1 already held
  the line exclusive.
* The upgrade launched for a line filled while no private cache held it
  aborts whenever any other non-speculative copy has appeared since;
  staying in shared state is always functionally safe.

Transactions arbitrate onto the bus round-robin by requester id, one grant
per tick; each grant applies its state changes atomically and delivers data
after the source latency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .caches import Mesi
from .errors import SpeculativeExclusiveForbiddenError
from .filtercache import Origin


class MsgKind(Enum):
    GETS = "GetS"
    GETX = "GetX"
    UPGRADE = "Upgrade"
    SE_UPGRADE = "SEUpgrade"
    NACK = "Nack"
    DATA = "Data"
    INV_FILTER_BROADCAST = "InvFilterBroadcast"
    WRITEBACK_THROUGH = "WritebackThrough"
    PREFETCH = "Prefetch"


@dataclass
class CoherenceMsg:
    tick: int
    kind: MsgKind
    paddr_line: int
    core: int
    thread: int | None
    speculative: bool
    note: str = ""

    def format(self) -> str:
        spec = "spec" if self.speculative else "nonspec"
        who = f"core{self.core}" if self.core >= 0 else "prefetcher"
        out = f"{self.tick} {self.kind.value} line={self.paddr_line:#x} {who} {spec}"
        return out + (f" {self.note}" if self.note else "")


@dataclass
class Grant:
    data: int
    origin: Origin
    se_eligible: bool
    sole_copy: bool
    latency: int
    grant_tick: int


@dataclass
class Nacked:
    latency: int
    grant_tick: int


@dataclass
class BusRequest:
    kind: MsgKind
    paddr_line: int
    core: int           # requester core id; the prefetcher uses num_cores
    thread: int | None
    inst_id: int | None
    speculative: bool
    inst_side: bool = False
    fill_l1: bool = False       # install into the requester's L1 at grant
    allow_exclusive: bool = False  # demand fills may take E when sole (baseline)
    store_value: int | None = None
    on_done: Callable | None = None


@dataclass
class CoherenceCounters:
    bus_transactions: int = 0
    gets: int = 0
    nacks: int = 0
    retries: int = 0
    getx: int = 0
    upgrades: int = 0
    silent_upgrades: int = 0
    se_launched: int = 0
    se_completed: int = 0
    se_aborted: int = 0
    inv_filter_broadcasts: int = 0
    prefetch_transactions: int = 0

    def as_dict(self) -> dict:
        return self.__dict__.copy()


class Bus:
    """Shared snooping bus between the L1s, the L2 and memory."""

    def __init__(self, machine):
        self.m = machine
        self.kernel = machine.kernel
        self.queue: list[BusRequest] = []
        self.counters = CoherenceCounters()
        self.log: list[CoherenceMsg] | None = [] if machine.log_protocol else None
        self._rr = 0
        self._arb_scheduled = False
        self._last_grant = -1
        self._num_ids = machine.cfg.cores + 1  # cores plus the prefetcher

    # ------------------------------------------------------------------ util

    def record(self, kind: MsgKind, line: int, core: int, thread, speculative, note="") -> None:
        if self.log is not None:
            self.log.append(CoherenceMsg(self.kernel.now, kind, line, core, thread, speculative, note))

    def _remote_l1s(self, core: int):
        for cid in range(self.m.cfg.cores):
            if cid == core:
                continue
            yield self.m.l1d[cid]
            yield self.m.l1i[cid]

    def _all_l1s(self):
        for cid in range(self.m.cfg.cores):
            yield self.m.l1d[cid]
            yield self.m.l1i[cid]

    def remote_me_holder(self, core: int, line: int):
        """Remote private cache holding the line in M or E, if any."""
        for cache in self._remote_l1s(core):
            found = cache.probe(line)
            if found is not None and found.state in (Mesi.M, Mesi.E):
                return cache, found
        return None

    def remote_holds(self, core: int, line: int) -> bool:
        for cache in self._remote_l1s(core):
            if cache.probe(line) is not None:
                return True
        return False

    def sole_copy(self, core: int, line: int) -> bool:
        """True when no non-speculative cache other than the requester's own
        L1s holds the line (the L2 included)."""
        if self.remote_holds(core, line):
            return False
        return self.m.l2.probe(line) is None

    # ------------------------------------------------------------- scheduling

    def request(self, req: BusRequest) -> None:
        self.queue.append(req)
        self._ensure_arbitration()

    def _ensure_arbitration(self) -> None:
        if self._arb_scheduled or not self.queue:
            return
        tick = max(self.kernel.now, self._last_grant + 1)
        self.kernel.schedule_at(tick, self._arbitrate, "bus-arb")
        self._arb_scheduled = True

    def _arbitrate(self) -> None:
        self._arb_scheduled = False
        if not self.queue:
            return
        req = self._pick()
        self._last_grant = self.kernel.now
        self._execute(req)
        self._ensure_arbitration()

    def _pick(self) -> BusRequest:
        for offset in range(self._num_ids):
            cid = (self._rr + offset) % self._num_ids
            for i, req in enumerate(self.queue):
                if req.core == cid:
                    self._rr = (cid + 1) % self._num_ids
                    return self.queue.pop(i)
        return self.queue.pop(0)  # unreachable with well-formed ids

    # ------------------------------------------------------------ transactions

    def _execute(self, req: BusRequest) -> None:
        self.counters.bus_transactions += 1
        if req.kind is MsgKind.GETS:
            self._do_gets(req)
        elif req.kind in (MsgKind.GETX, MsgKind.UPGRADE):
            self._do_getx(req)
        elif req.kind is MsgKind.SE_UPGRADE:
            self._do_se_upgrade(req)
        elif req.kind is MsgKind.PREFETCH:
            self._do_prefetch(req)
        else:  # pragma: no cover - guarded by request constructors
            raise AssertionError(f"bus cannot execute {req.kind}")
        if self.m.audit_mode:
            self.m.audit()

    def _do_gets(self, req: BusRequest) -> None:
        self.counters.gets += 1
        self.record(MsgKind.GETS, req.paddr_line, req.core, req.thread, req.speculative)
        now = self.kernel.now
        l2_lat = self.m.cfg.caches.l2.hit_latency

        holder = self.remote_me_holder(req.core, req.paddr_line)
        if holder is not None and req.speculative:
            # Delay the access instead of downgrading the owner: the owner's
            # state is exactly what must stay invisible to speculation.
            self.counters.nacks += 1
            self.record(MsgKind.NACK, req.paddr_line, req.core, req.thread, True)
            if req.on_done:
                result = Nacked(latency=l2_lat, grant_tick=now)
                self.kernel.schedule_at(now + l2_lat, lambda: req.on_done(result), "nack-delivery")
            return

        if holder is not None:
            cache, line = holder
            data = line.data
            if line.state is Mesi.M:
                self.m.memory.write(req.paddr_line, data)
                cache.counters.writebacks += 1
            cache.set_state(req.paddr_line, Mesi.S)
            latency = l2_lat
            origin = Origin.L1
        else:
            # The L2 lookup happens inside the bus window; speculative
            # sourcing must not disturb L2 replacement state.
            l2_line = self.m.l2.probe(req.paddr_line, count=True)
            if l2_line is not None:
                if not req.speculative:
                    self.m.l2.touch(req.paddr_line)
                if l2_line.prefetched:
                    self.m.prefetcher.counters.useful += 1
                    l2_line.prefetched = False
                data = l2_line.data
                latency = l2_lat
                origin = Origin.L2
            else:
                data = self.m.memory.read(req.paddr_line)
                latency = l2_lat + self.m.cfg.caches.memory_latency
                origin = Origin.MEMORY

        se_eligible = not self.remote_holds(req.core, req.paddr_line)
        sole = se_eligible and self.m.l2.probe(req.paddr_line) is None

        if self.m.train_prefetcher_on_access and not req.inst_side:
            target = self.m.prefetcher.train(req.paddr_line)
            if target is not None and self.m.prefetcher.enqueue(target):
                self.m.pump_prefetches()

        if req.fill_l1:
            state = Mesi.E if (sole and req.allow_exclusive) else Mesi.S
            if state is Mesi.E and self.m.protected:
                # Any exclusive acquisition must invalidate filter copies.
                self.broadcast_inv_filter(req.paddr_line, exclude_thread=req.thread)
            self.m.fill_l1(req.core, req.inst_side, req.paddr_line, state, data)

        self.record(MsgKind.DATA, req.paddr_line, req.core, req.thread, req.speculative,
                    note=f"origin={origin.value}")
        if req.on_done:
            result = Grant(data, origin, se_eligible, sole, latency, now)
            self.kernel.schedule_at(now + latency, lambda: req.on_done(result), "bus-data")

    def _do_getx(self, req: BusRequest) -> None:
        if req.speculative:
            raise SpeculativeExclusiveForbiddenError(
                "speculative accesses may not acquire exclusive state"
            )
        now = self.kernel.now
        l2_lat = self.m.cfg.caches.l2.hit_latency
        own = self.m.l1d[req.core].probe(req.paddr_line)
        had_upgrade = own is not None and own.state is Mesi.S
        kind = MsgKind.UPGRADE if had_upgrade else MsgKind.GETX
        if had_upgrade:
            self.counters.upgrades += 1
        else:
            self.counters.getx += 1
        self.record(kind, req.paddr_line, req.core, req.thread, False)

        latency = l2_lat
        data_needed = own is None
        data = own.data if own is not None else 0
        for cache in self._remote_l1s(req.core):
            line = cache.probe(req.paddr_line)
            if line is None:
                continue
            if line.state is Mesi.M:
                data, data_needed = line.data, False
            cache.invalidate(req.paddr_line)
            cache.counters.evictions += 1
        l2_line = self.m.l2.probe(req.paddr_line)
        if l2_line is not None:
            if l2_line.state is Mesi.M and data_needed:
                data, data_needed = l2_line.data, False
            self.m.l2.invalidate(req.paddr_line)
        if data_needed:
            data = self.m.memory.read(req.paddr_line)
            latency = l2_lat + self.m.cfg.caches.memory_latency

        suppressed = own is not None and own.state in (Mesi.E, Mesi.M)
        if not suppressed:
            self.broadcast_inv_filter(req.paddr_line, exclude_thread=req.thread)

        value = req.store_value if req.store_value is not None else data
        self.m.fill_l1(req.core, False, req.paddr_line, Mesi.M, value)
        if req.on_done:
            result = Grant(value, Origin.MEMORY, False, False, latency, now)
            self.kernel.schedule_at(now + latency, lambda: req.on_done(result), "getx-done")

    def _do_se_upgrade(self, req: BusRequest) -> None:
        """Asynchronous shared-to-exclusive upgrade launched at commit."""
        self.record(MsgKind.SE_UPGRADE, req.paddr_line, req.core, req.thread, False)
        own = self.m.l1d[req.core].probe(req.paddr_line)
        l2_line = self.m.l2.probe(req.paddr_line)
        conflicting = (
            own is None
            or own.state is not Mesi.S
            or self.remote_holds(req.core, req.paddr_line)
            or (l2_line is not None and l2_line.state is Mesi.M)
        )
        if conflicting:
            self.counters.se_aborted += 1
            self.record(MsgKind.SE_UPGRADE, req.paddr_line, req.core, req.thread, False,
                        note="aborted")
            return
        if l2_line is not None:
            self.m.l2.invalidate(req.paddr_line)
        self.broadcast_inv_filter(req.paddr_line, exclude_thread=req.thread)
        self.m.l1d[req.core].set_state(req.paddr_line, Mesi.E)
        self.counters.se_completed += 1

    def _do_prefetch(self, req: BusRequest) -> None:
        self.counters.prefetch_transactions += 1
        self.record(MsgKind.PREFETCH, req.paddr_line, -1, None, False)
        now = self.kernel.now
        line = req.paddr_line
        done_lat = self.m.cfg.caches.l2.hit_latency

        def finish():
            self.m.prefetcher.complete(line)
            self.m.prefetch_complete()
            self.m.pump_prefetches()

        suppressed = False
        for cache in self._all_l1s():
            found = cache.probe(line)
            if found is not None and found.state in (Mesi.M, Mesi.E):
                suppressed = True  # prefetches never force downgrades
                break
        if suppressed:
            self.m.prefetcher.counters.suppressed += 1
        elif self.m.l2.probe(line) is None:
            state = Mesi.E if not any(c.probe(line) for c in self._all_l1s()) else Mesi.S
            data = self.m.memory.read(line)
            self.m.l2.fill(line, state, data, prefetched=True)
            self.m.prefetcher.counters.issued += 1
            done_lat += self.m.cfg.caches.memory_latency
        self.kernel.schedule_at(now + done_lat, finish, "prefetch-done")

    # ---------------------------------------------------------------- helpers

    def broadcast_inv_filter(self, line: int, exclude_thread: int | None) -> None:
        """Constant-time invalidation of every other thread's filter caches."""
        self.counters.inv_filter_broadcasts += 1
        self.record(MsgKind.INV_FILTER_BROADCAST, line, -1, exclude_thread, False)
        self.m.apply_filter_invalidation(line, exclude_thread)
