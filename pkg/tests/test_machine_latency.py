"""Observable latency composition along every hierarchy path."""

from fcsim.config import RunConfig
from fcsim.machine import Machine
from fcsim.tlb import DomainId


def make_machine(defense="muontrap", parallel=False):
    cfg = RunConfig()
    cfg.cores = 1
    cfg.flags.defense = defense
    cfg.flags.parallel_l0_l1 = parallel
    return Machine(cfg)


def warm_page_in_filter_tlb(m, base):
    """A cold access walks, leaving the page warm in the filter TLB."""
    m.wait(m.load(0, base))
    m.commit_all(0)
    m.barrier()


def test_l0_hit_is_one_cycle():
    m = make_machine()
    warm_page_in_filter_tlb(m, 0x8000)
    tok = m.load(0, 0x8000)
    m.wait(tok)
    assert tok.latency == 1
    assert tok.components == {"l0": 1}
    m.commit_all(0)


def test_l1_hit_is_l0_plus_l1_with_warm_filter_tlb():
    m = make_machine()
    warm_page_in_filter_tlb(m, 0x8000)
    # evict 0x8000 from its L0 set (8 sets, so +512B steps alias)
    for k in range(1, 5):
        m.wait(m.load(0, 0x8000 + k * 512))
    m.commit_all(0)
    m.barrier()
    tok = m.load(0, 0x8000)
    m.wait(tok)
    assert tok.latency == 3  # serial: one L0 cycle then the 2-cycle L1
    assert tok.components == {"l0": 1, "l1": 2}
    m.commit_all(0)


def test_l2_hit_costs_exactly_twenty_more():
    m = make_machine()
    base = 0x100000
    warm_page_in_filter_tlb(m, base)
    for i in range(1, 3):  # stride training, commits notify the prefetcher
        m.wait(m.load(0, base + i * 64))
        m.commit_all(0)
    m.barrier()
    assert m.prefetcher.counters.issued == 1
    tok = m.load(0, base + 3 * 64)  # prefetched line lives only in the L2
    m.wait(tok)
    assert tok.components["l2"] == 20
    assert tok.latency == 23  # 1 + 2 + 20
    m.commit_all(0)


def test_memory_adds_the_fixed_constant():
    m = make_machine()
    warm_page_in_filter_tlb(m, 0x8000)
    tok = m.load(0, 0x9000 - 64)  # same page, uncached line
    m.wait(tok)
    assert tok.latency == 103  # 1 + 2 + 20 + 80
    assert tok.components["mem"] == 80
    m.commit_all(0)


def test_main_tlb_path_adds_one_stall_cycle():
    m = make_machine()
    m.warm_translation(0, 0x8000)
    m.wait(m.load(0, 0x8000))
    m.commit_all(0)
    m.barrier()
    m.domain_switch(0, DomainId(0), "syscall")  # flush L0 and filter TLB
    tok = m.load(0, 0x8000)
    m.wait(tok)
    assert tok.latency == 4  # L0 miss at +1, translation ready at +2, L1 hit
    assert tok.components == {"l0": 1, "tlb_wait": 1, "l1": 2}
    m.commit_all(0)


def test_parallel_lookup_saves_the_l0_cycle():
    m = make_machine(parallel=True)
    warm_page_in_filter_tlb(m, 0x8000)
    for k in range(1, 5):
        m.wait(m.load(0, 0x8000 + k * 512))
    m.commit_all(0)
    m.barrier()
    tok = m.load(0, 0x8000)
    m.wait(tok)
    assert tok.latency == 2  # L1 probed alongside the L0
    m.commit_all(0)


def test_ifetch_path_uses_the_one_cycle_l1i():
    m = make_machine()
    m.wait(m.ifetch(0, 0x20000))
    m.commit_all(0)
    m.barrier()
    for k in range(1, 5):
        m.wait(m.ifetch(0, 0x20000 + k * 512))
    m.commit_all(0)
    m.barrier()
    tok = m.ifetch(0, 0x20000)
    m.wait(tok)
    assert tok.latency == 2  # 1 (L0I) + 1 (L1I)
    m.commit_all(0)


def test_unprotected_l1_hit_is_two_cycles():
    m = make_machine(defense="unprotected")
    m.warm_translation(0, 0x8000)
    m.wait(m.load(0, 0x8000))
    m.commit_all(0)
    tok = m.load(0, 0x8000)
    m.wait(tok)
    assert tok.latency == 2  # no filter cache in front of the L1
    m.commit_all(0)


def test_access_log_captures_components():
    cfg = RunConfig()
    cfg.cores = 1
    m = Machine(cfg, log_events=True)
    m.warm_translation(0, 0x8000)
    m.wait(m.load(0, 0x8000))
    m.commit_all(0)
    m.barrier()
    entry = m.access_log[0]
    assert entry["kind"] == "load"
    assert entry["components"]["l1"] == 2
    assert entry["components"]["l2"] == 20
    assert entry["components"]["mem"] == 80
    assert entry["latency"] == entry["resolve_tick"] - entry["issue_tick"]
