import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcsim.caches import Mesi, SetAssocCache
from fcsim.config import CacheLevelConfig
from fcsim.errors import SpeculativeFillForbiddenError


def small_cache(ways=2, sets=4, firewall=True):
    cfg = CacheLevelConfig(size_bytes=ways * sets * 64, ways=ways, hit_latency=2)
    return SetAssocCache("test", cfg, firewall=firewall)


def test_lookup_never_filled_misses():
    c = small_cache()
    assert c.lookup(0x123) is None
    assert c.counters.misses == 1


def test_lru_victim_after_three_fills_in_two_way_set():
    c = small_cache(ways=2, sets=4)
    # lines 0, 4, 8 all map to set 0
    c.fill(0, Mesi.S, 0)
    c.fill(4, Mesi.S, 0)
    evicted = c.fill(8, Mesi.S, 0)
    assert evicted is not None and evicted.tag == 0
    tags = sorted(line.tag for _, line in c.iter_lines())
    assert tags == [4, 8]


def test_hit_refreshes_lru():
    c = small_cache(ways=2, sets=4)
    c.fill(0, Mesi.S, 0)
    c.fill(4, Mesi.S, 0)
    c.lookup(0)  # 0 becomes MRU, 4 is now the victim
    evicted = c.fill(8, Mesi.S, 0)
    assert evicted.tag == 4


def test_firewall_rejects_speculative_fill():
    c = small_cache(firewall=True)
    with pytest.raises(SpeculativeFillForbiddenError):
        c.fill(0, Mesi.S, 0, speculative=True)
    baseline = small_cache(firewall=False)
    baseline.fill(0, Mesi.S, 0, speculative=True)
    assert baseline.probe(0) is not None


def test_probe_does_not_touch_lru():
    c = small_cache(ways=2, sets=4)
    c.fill(0, Mesi.S, 0)
    c.fill(4, Mesi.S, 0)
    c.probe(0)
    evicted = c.fill(8, Mesi.S, 0)
    assert evicted.tag == 0  # probe left 0 least recently used


def test_counters_balance():
    c = small_cache()
    for addr in (0, 4, 0, 8, 12):
        c.lookup(addr)
        c.fill(addr, Mesi.S, 0)
    assert c.counters.hits + c.counters.misses == c.counters.lookups


@given(st.lists(st.integers(min_value=0, max_value=15), min_size=1, max_size=60))
def test_set_never_exceeds_ways_and_holds_most_recent(tags):
    c = small_cache(ways=2, sets=4)
    for tag in tags:
        c.fill(tag, Mesi.S, tag)
    for set_idx, ways in c.sets.items():
        assert len(ways) <= 2
        assert all(line.tag % 4 == set_idx for line in ways)
    # the most recently filled tag must be resident
    assert c.probe(tags[-1]) is not None
