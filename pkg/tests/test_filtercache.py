from hypothesis import given
from hypothesis import strategies as st

from fcsim.addr import LineAddr
from fcsim.config import FilterConfig
from fcsim.filtercache import CommitAction, FilterCache, Origin


def make_fc(size=2048, ways=4, block=False, allow_se=True):
    return FilterCache("fc", FilterConfig(size_bytes=size, ways=ways),
                       allow_se=allow_se, block_uncommitted_eviction=block)


def la(pline, vline=None):
    return LineAddr(pline, pline if vline is None else vline)


def test_hit_requires_valid_and_vtag():
    fc = make_fc()
    fc.fill(la(5), 99, Origin.MEMORY)
    assert fc.lookup_cpu(5).data == 99
    fc.flush()
    assert fc.lookup_cpu(5) is None  # tags intact, valid bit cleared


def test_alias_overwrite_keeps_one_copy_per_physical_line():
    fc = make_fc()
    # same physical line, two virtual tags sharing in-page bits (+64 lines)
    fc.fill(la(5, 5), 1, Origin.MEMORY)
    fc.fill(la(5, 5 + 64), 2, Origin.MEMORY)
    assert fc.lookup_cpu(5) is None        # old alias gone
    assert fc.lookup_cpu(5 + 64).data == 2
    copies = [ln for _, ln in fc.iter_lines() if ln.valid and ln.ptag == 5]
    assert len(copies) == 1


def test_fifth_line_in_four_way_set_drops_lru_silently():
    fc = make_fc()  # 8 sets, 4 ways
    for k in range(5):
        fc.fill(la(k * 8), k, Origin.MEMORY)  # all map to set 0
    assert fc.counters.evictions == 1
    assert fc.counters.uncommitted_drops == 1
    assert fc.snoop(0) is None
    assert fc.snoop(32) is not None


def test_commit_line_outcomes():
    fc = make_fc()
    fc.fill(la(3), 7, Origin.L2, speculative=True, se_pending=True)
    first = fc.commit_line(3)
    assert first.action is CommitAction.WRITE_THROUGH
    assert first.launch_se_upgrade is True
    assert first.origin is Origin.L2
    assert fc.snoop(3).committed
    second = fc.commit_line(3)
    assert second.action is CommitAction.NONE
    assert second.launch_se_upgrade is False
    absent = fc.commit_line(99)
    assert absent.action is CommitAction.REFETCH


def test_instruction_variant_never_marks_se():
    fc = make_fc(allow_se=False)
    fc.fill(la(4), 0, Origin.MEMORY, se_pending=True)
    assert fc.snoop(4).se_pending is False


def test_flush_returns_one_cycle_at_any_occupancy():
    for occupancy in range(0, 33):
        fc = make_fc()
        for k in range(occupancy):
            fc.fill(la(k), 0, Origin.MEMORY)
        assert fc.occupancy() == occupancy
        assert fc.flush() == 1
        assert fc.occupancy() == 0


def test_snoop_and_invalidate_by_physical_tag():
    fc = make_fc()
    fc.fill(la(9, 9 + 64), 0, Origin.L1)
    assert fc.snoop(9) is not None
    assert fc.snoop_invalidate(9) is True
    assert fc.snoop(9) is None
    assert fc.snoop_invalidate(9) is False


def test_committed_lines_stay_resident_and_snoopable():
    fc = make_fc()
    fc.fill(la(6), 0, Origin.MEMORY)
    fc.commit_line(6)
    assert fc.snoop(6) is not None
    assert fc.lookup_cpu(6) is not None


def test_blocked_eviction_refuses_fill_of_full_uncommitted_set():
    fc = make_fc(size=128, ways=1, block=True)  # two 1-line sets
    fc.fill(la(0), 0, Origin.MEMORY)            # set 0, uncommitted
    assert fc.can_fill(2) is False              # line 2 maps to set 0
    assert fc.fill(la(2), 0, Origin.MEMORY) is None
    assert fc.snoop(2) is None                  # blocked, nothing installed
    fc.commit_line(0)
    assert fc.can_fill(2) is True
    fc.fill(la(2), 0, Origin.MEMORY)
    assert fc.snoop(2) is not None


def test_functional_state_is_shared_or_invalid():
    fc = make_fc()
    fc.fill(la(1), 0, Origin.MEMORY)
    line = fc.snoop(1)
    assert line.functional_state == "S"
    fc.flush()
    for _, ln in fc.iter_lines():
        assert ln.functional_state == "I"


@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 3)), max_size=60))
def test_at_most_one_valid_copy_per_physical_tag(ops):
    fc = make_fc()
    for pline, alias in ops:
        fc.fill(la(pline, pline + alias * 64), 0, Origin.MEMORY)
    seen = {}
    for _, line in fc.iter_lines():
        if line.valid:
            assert line.ptag not in seen
            seen[line.ptag] = True
