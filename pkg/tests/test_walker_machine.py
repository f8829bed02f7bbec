"""Translation behaviour through the machine: filter TLB isolation,
commit-time promotion, walker traffic through the data filter cache,
and fill suppression on permission faults."""

import pytest

from fcsim.config import RunConfig
from fcsim.core import TokenState
from fcsim.errors import ScriptError
from fcsim.machine import Machine
from fcsim.tlb import DomainId, Perms

DOM = DomainId(5)


def make_machine(defense="muontrap", filter_entries=8):
    cfg = RunConfig()
    cfg.cores = 1
    cfg.flags.defense = defense
    cfg.tlb.filter_entries = filter_entries
    m = Machine(cfg)
    m.set_domain(0, DOM)
    return m


def test_speculative_walk_installs_only_the_filter_tlb():
    m = make_machine()
    m.spec_begin(0)
    m.wait(m.load(0, 0x40000))
    m.squash(0)
    assert m.ftlb[0].lookup(DOM, 0x40, touch=False) is not None
    assert m.mtlb_d[0].lookup(DOM, 0x40, touch=False) is None
    m.mtlb_d[0].misses = 0  # counters are not under test here


def test_commit_promotes_the_translation_to_the_main_tlb():
    m = make_machine()
    m.wait(m.load(0, 0x40000))
    m.commit_all(0)
    entry = m.mtlb_d[0].lookup(DOM, 0x40, touch=False)
    assert entry is not None and entry.committed
    assert m.ftlb[0].lookup(DOM, 0x40, touch=False).committed
    assert m.tlb_promotions == 1


def test_domain_switch_flushes_filter_tlb_only():
    m = make_machine()
    m.wait(m.load(0, 0x40000))
    m.commit_all(0)
    m.barrier()
    m.domain_switch(0, DomainId(6), "ctx")
    assert m.ftlb[0].entries == []
    assert m.mtlb_d[0].lookup(DOM, 0x40, touch=False) is not None


def test_walk_reads_traverse_the_data_filter_cache():
    m = make_machine()
    root_line, leaf_line = m.pagetables.walk_lines(DOM, 0x40)
    m.spec_begin(0)
    m.wait(m.load(0, 0x40000))
    assert m.l0d[0].snoop(root_line) is not None
    assert m.l0d[0].snoop(leaf_line) is not None
    assert m.l1d[0].probe(root_line) is None   # speculative: L0 only
    m.squash(0)
    m.domain_switch(0, DomainId(6), "ctx")
    assert m.l0d[0].snoop(root_line) is None   # vanished with the flush


def test_second_walk_hits_the_filter_cache():
    m = make_machine()
    first = m.load(0, 0x40000)
    m.wait(first)
    m.commit_all(0)
    m.barrier()
    # new page, same leaf group: the walk lines for vpage 0x41 share the root
    second = m.load(0, 0x41000)
    m.wait(second)
    assert second.latency < first.latency
    m.commit_all(0)


def test_committed_walk_lines_are_written_through():
    m = make_machine()
    root_line, leaf_line = m.pagetables.walk_lines(DOM, 0x40)
    m.wait(m.load(0, 0x40000))
    m.commit_all(0)
    m.barrier()
    assert m.l1d[0].probe(root_line) is not None
    assert m.l1d[0].probe(leaf_line) is not None
    assert m.l0d[0].snoop(root_line).committed


def test_permission_fault_fills_nothing():
    m = make_machine()
    m.pagetables.map_page(DOM, 0x50, 0x50, Perms(read=False))
    m.spec_begin(0)
    tok = m.load(0, 0x50000)
    m.barrier()
    assert tok.state is TokenState.FAULTED
    assert tok.fault == "permission"
    assert m.l0d[0].snoop(0x50000 // 64) is None
    assert m.l1d[0].probe(0x50000 // 64) is None
    m.squash(0)


def test_deferred_permission_check_lets_the_fill_happen():
    cfg = RunConfig()
    cfg.cores = 1
    cfg.flags.defense = "unprotected"
    cfg.flags.permission_check_before_fill = False
    m = Machine(cfg)
    m.set_domain(0, DOM)
    m.pagetables.map_page(DOM, 0x50, 0x50, Perms(read=False))
    m.spec_begin(0)
    tok = m.load(0, 0x50000)
    m.barrier()
    assert tok.state is TokenState.RESOLVED
    assert tok.fault_deferred
    assert m.l1d[0].probe(0x50000 // 64) is not None
    m.squash(0)


def test_page_fault_aborts_the_access():
    m = make_machine()
    m.pagetables.auto_identity = False
    m.spec_begin(0)
    tok = m.load(0, 0x60000)
    m.barrier()
    assert tok.state is TokenState.FAULTED
    assert tok.fault == "page_fault"
    m.squash(0)


def test_committing_a_faulted_instruction_is_a_script_error():
    m = make_machine()
    m.pagetables.map_page(DOM, 0x50, 0x50, Perms(read=False))
    m.load(0, 0x50000)
    m.barrier()
    with pytest.raises(ScriptError):
        m.commit_all(0)


@pytest.mark.parametrize("entries", [4, 8, 16])
def test_filter_tlb_capacity_is_tunable(entries):
    m = make_machine(filter_entries=entries)
    for i in range(entries + 2):
        m.spec_begin(0)
        m.wait(m.load(0, (0x100 + i) * 4096))
        m.squash(0)
    assert len(m.ftlb[0].entries) == entries
    assert m.mtlb_d[0].entries == []
