"""Non-speculative purity: squashed work leaves no trace outside the
filter structures. Deleting every squashed access from a script must leave
the L1s, the L2, the main TLBs and the prefetcher bit-identical."""

import pytest

from helpers import build_machine, gen_mixed_blocks, materialize, purity_states
from fcsim.trace import run_trace


@pytest.mark.parametrize("seed", range(12))
def test_delete_squashed_equivalence_sample(seed):
    full, filtered = purity_states(seed)
    assert full == filtered


def test_squashed_access_changes_no_other_core_state():
    blocks = gen_mixed_blocks(3)
    squash_blocks = [b for b in blocks if b[0] == "squash"]
    assert squash_blocks, "generator must produce speculative bursts"
    full = build_machine()
    run_trace(full, materialize(blocks, include_squashed=True))
    filtered = build_machine()
    run_trace(filtered, materialize(blocks, include_squashed=False))
    # stronger than snapshot equality: state equality holds per cache
    for name, content in full.ns_state_snapshot().items():
        assert filtered.ns_state_snapshot()[name] == content, name


def test_purity_holds_with_clear_on_misspeculate():
    full, filtered = purity_states(7, clear_on_misspeculate=True)
    assert full == filtered


def test_defense_profiles_agree_on_squash_free_traces():
    """Without squashes, the defense only reshapes the speculative path:
    level-by-level hit and miss counts match the unprotected baseline on a
    no-reuse-then-full-reuse stream."""
    from fcsim.trace import TraceRecord
    from helpers import BASE, build_machine

    records = []
    issued = 0
    for _ in range(2):  # two passes over 512 distinct lines
        for i in range(512):
            records.append(TraceRecord(0, "LOAD", (BASE + i * 64,)))
            issued += 1
            if issued % 8 == 0:
                records.append(TraceRecord(0, "COMMIT_TO", (issued,)))
                records.append(TraceRecord(0, "BARRIER", ()))
    counts = {}
    for defense in ("unprotected", "muontrap"):
        m = build_machine(cores=1, defense=defense)
        for page in range(0, 512 * 64, 4096):  # warm: walks differ per profile
            m.warm_translation(0, BASE + page)
        stats = run_trace(m, records)
        counts[defense] = {
            "l1d_hits": stats["caches"]["l1d"]["hits"],
            "l1d_misses": stats["caches"]["l1d"]["misses"],
            "l2_hits": stats["caches"]["l2"]["hits"],
            "l2_misses": stats["caches"]["l2"]["misses"],
        }
    assert counts["unprotected"] == counts["muontrap"]
