import pytest

from fcsim.errors import PageFaultError, PermissionFaultError
from fcsim.tlb import DomainId, FullyAssocTlb, PageTables, Perms, TlbEntry

D1 = DomainId(1)
D2 = DomainId(2)


def entry(vpage, domain=D1, ppage=None, perms=Perms()):
    return TlbEntry(vpage, vpage if ppage is None else ppage, domain, perms)


def test_hit_requires_domain_match():
    tlb = FullyAssocTlb("t", 4)
    tlb.insert(entry(5, D1))
    assert tlb.lookup(D1, 5) is not None
    assert tlb.lookup(D2, 5) is None


def test_lru_eviction_at_capacity():
    tlb = FullyAssocTlb("t", 2)
    tlb.insert(entry(1))
    tlb.insert(entry(2))
    tlb.lookup(D1, 1)            # 1 becomes MRU
    evicted = tlb.insert(entry(3))
    assert evicted.vpage == 2
    assert tlb.lookup(D1, 2) is None


def test_flush_empties():
    tlb = FullyAssocTlb("t", 4)
    tlb.insert(entry(1))
    tlb.flush()
    assert tlb.lookup(D1, 1) is None


def test_page_tables_resolve_and_fault():
    pt = PageTables(auto_identity=False)
    pt.map_page(D1, 7, 0x70, Perms(read=True, write=False))
    assert pt.resolve(D1, 7) == (0x70, Perms(read=True, write=False))
    with pytest.raises(PageFaultError):
        pt.resolve(D1, 8)
    with pytest.raises(PermissionFaultError):
        pt.check_perms(D1, 7, "store")
    assert pt.check_perms(D1, 7, "load")[0] == 0x70


def test_auto_identity_maps_on_demand():
    pt = PageTables(auto_identity=True)
    ppage, perms = pt.resolve(D1, 1234)
    assert ppage == 1234 and perms.allows("store")


def test_walk_lines_are_distinct_per_domain_and_page_group():
    pt = PageTables()
    r1, l1 = pt.walk_lines(D1, 0)
    r2, l2 = pt.walk_lines(D1, 64)   # different root group
    r3, l3 = pt.walk_lines(D2, 0)
    assert r1 != r2 and l1 != l2
    assert r1 != r3 and l1 != l3
    assert pt.walk_lines(D1, 0) == (r1, l1)  # deterministic
    # pages sharing a leaf line share it
    assert pt.walk_lines(D1, 1)[1] == l1
