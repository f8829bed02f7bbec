import pytest

from fcsim.config import RunConfig
from fcsim.core import TokenState
from fcsim.errors import (CapacityFullError, InFlightRemainsError,
                          OutOfOrderCommitError)
from fcsim.machine import Machine
from fcsim.tlb import DomainId

D_A = DomainId(1)
D_B = DomainId(2)


def make_machine(cores=1, defense="muontrap", **flags) -> Machine:
    cfg = RunConfig()
    cfg.cores = cores
    cfg.flags.defense = defense
    for key, value in flags.items():
        setattr(cfg.flags, key, value)
    return Machine(cfg)


def warmed(m, tid, *addrs, domain=None):
    for addr in addrs:
        m.warm_translation(m.threads[tid].tid, addr, domain=domain)
    return m


def test_inst_ids_increase_and_commit_in_order():
    m = make_machine()
    t1 = m.load(0, 0x1000)
    t2 = m.load(0, 0x2000)
    assert t2.op.inst_id == t1.op.inst_id + 1
    m.barrier()
    with pytest.raises(OutOfOrderCommitError):
        m.commit(0, t2.op.inst_id)
    m.commit(0, t1.op.inst_id)
    m.commit(0, t2.op.inst_id)


def test_load_queue_capacity():
    cfg = RunConfig()
    cfg.cores = 1
    cfg.core.lq_entries = 2
    m = Machine(cfg)
    m.load(0, 0x0)
    m.load(0, 0x40)
    with pytest.raises(CapacityFullError):
        m.load(0, 0x80)
    m.ifetch(0, 0xc0)  # other kinds unaffected
    m.barrier()
    m.commit_all(0)


def test_store_buffers_value_and_forwards_within_thread():
    m = warmed(make_machine(), 0, 0x3000)
    st = m.store(0, 0x3000, 0xBEEF)
    ld = m.load(0, 0x3008)  # same line, forwarded from the store queue
    m.wait(ld)
    assert ld.latency == 1
    assert ld.data == 0xBEEF
    assert ld.hit_level == "forward"
    m.barrier()
    m.commit_all(0)


def test_store_issue_prefetches_shared_line_without_touching_l1():
    m = warmed(make_machine(), 0, 0x4000)
    st = m.store(0, 0x4000, 7)
    m.wait(st)
    line = 0x4000 // 64
    assert m.l0d[0].snoop(line) is not None
    assert m.l0d[0].snoop(line).committed is False
    assert m.l1d[0].probe(line) is None  # exclusive read deferred to commit
    m.commit_all(0)
    m.barrier()
    assert m.l1d[0].probe(line).state.value == "M"
    assert m.l1d[0].probe(line).data == 7


def test_squash_keeps_filter_contents_by_default():
    m = warmed(make_machine(), 0, 0x5000)
    m.spec_begin(0)
    tok = m.load(0, 0x5000)
    m.wait(tok)
    m.squash(0)
    hit = m.load(0, 0x5000)
    m.wait(hit)
    assert hit.latency == 1  # still in the L0
    assert m.l1d[0].probe(0x5000 // 64) is None  # never externalized
    m.commit_all(0)


def test_squash_with_clear_on_misspeculate_flushes():
    m = warmed(make_machine(clear_on_misspeculate=True), 0, 0x5000)
    m.spec_begin(0)
    m.wait(m.load(0, 0x5000))
    m.squash(0)
    miss = m.load(0, 0x5000)
    m.wait(miss)
    assert miss.latency > 1
    assert m.l1d[0].probe(0x5000 // 64) is None
    m.commit_all(0)


def test_squashed_tokens_are_cancelled():
    m = make_machine()
    m.spec_begin(0)
    tok = m.load(0, 0x6000)
    m.squash(0)
    assert tok.state is TokenState.CANCELLED


def test_domain_switch_requires_drained_pipeline():
    m = make_machine()
    m.load(0, 0x1000)
    with pytest.raises(InFlightRemainsError):
        m.domain_switch(0, D_B, "ctx")


def test_domain_switch_flushes_filter_structures():
    m = warmed(make_machine(), 0, 0x7000)
    m.wait(m.load(0, 0x7000))
    m.commit_all(0)
    m.barrier()
    m.domain_switch(0, D_B, "ctx")
    probe = m.load(0, 0x7000)
    m.wait(probe)
    assert probe.latency > 1          # L0 miss after the flush
    assert "l1" in probe.components   # committed copy still hits the L1
    assert probe.components.get("l2") is None
    m.commit_all(0)


def test_domain_switch_costs_one_cycle_at_any_occupancy():
    costs = set()
    for occupancy in (0, 8, 32):
        m = make_machine()
        for k in range(occupancy):
            m.warm_translation(0, k * 64)
            m.wait(m.load(0, k * 64))
        m.commit_all(0)
        m.barrier()
        before = m.now
        m.domain_switch(0, D_B, "ctx")
        costs.add(m.now - before)
        assert m.l0d[0].occupancy() == 0
    assert costs == {1}


def test_committed_lines_survive_switch_in_l1():
    m = warmed(make_machine(), 0, 0x8000)
    m.wait(m.load(0, 0x8000))
    m.commit_all(0)
    m.barrier()
    m.domain_switch(0, D_B, "ctx")
    assert m.l1d[0].probe(0x8000 // 64) is not None


def test_unprotected_profile_fills_l1_at_issue_and_ignores_squash():
    m = make_machine(defense="unprotected")
    m.warm_translation(0, 0x9000)
    m.spec_begin(0)
    m.wait(m.load(0, 0x9000))
    m.squash(0)
    assert m.l1d[0].probe(0x9000 // 64) is not None


def test_commit_of_already_committed_line_makes_no_traffic():
    m = warmed(make_machine(), 0, 0xA000)
    m.wait(m.load(0, 0xA000))
    m.commit_all(0)
    m.barrier()
    before = m.bus.counters.bus_transactions
    fills_before = m.l1d[0].counters.fills
    m.wait(m.load(0, 0xA000))  # hits the committed L0 line
    m.commit_all(0)
    m.barrier()
    assert m.bus.counters.bus_transactions == before
    assert m.l1d[0].counters.fills == fills_before


def test_commit_refetch_after_l0_eviction_fills_l1_only():
    cfg = RunConfig()
    cfg.cores = 1
    cfg.filter.size_bytes = 128
    cfg.filter.ways = 1
    m = Machine(cfg)
    m.warm_translation(0, 0)
    m.warm_translation(0, 0x1000)
    keep = m.load(0, 0)            # set 0
    m.wait(keep)
    evict = m.load(0, 0x1000)      # also set 0, evicts the first line
    m.wait(evict)
    assert m.l0d[0].snoop(0) is None
    m.commit_all(0)                # first commit must refetch line 0
    m.barrier()
    assert m.l1d[0].probe(0) is not None
    assert m.l0d[0].snoop(0) is None  # no L0 refill on the commit path
