"""Shared generators and checkers for property and acceptance tests."""

from __future__ import annotations

import random

from fcsim.addr import LINE_SIZE
from fcsim.config import RunConfig
from fcsim.machine import Machine, default_memory_value
from fcsim.trace import TraceRecord, run_trace

BASE = 0x2000000


def build_machine(cores=3, defense="muontrap", **flags) -> Machine:
    cfg = RunConfig()
    cfg.cores = cores
    cfg.flags.defense = defense
    for key, value in flags.items():
        setattr(cfg.flags, key, value)
    return Machine(cfg)


# ---------------------------------------------------------------- purity

def gen_mixed_blocks(seed: int, threads: int = 3, blocks: int = 14, lines: int = 10):
    """Abstract script blocks mixing committed work, squashed speculative
    bursts and domain switches. Squashed bursts sit behind an older
    uncommitted blocker load, the way a mispredicted branch waits on a slow
    condition, so none of their accesses ever reaches the head of the queue.
    """
    rng = random.Random(seed)
    pool = [BASE + i * LINE_SIZE for i in range(lines)]
    out = []
    for _ in range(blocks):
        tid = rng.randrange(threads)
        roll = rng.random()
        if roll < 0.15:
            out.append(("switch", tid, rng.randrange(1, 4)))
            continue
        ops = []
        for _ in range(rng.randint(1, 3)):
            addr = rng.choice(pool)
            pick = rng.random()
            if pick < 0.25:
                ops.append(("STORE", addr, rng.randrange(1, 1 << 16)))
            elif pick < 0.35:
                ops.append(("IFETCH", addr))
            else:
                ops.append(("LOAD", addr))
        kind = "squash" if roll < 0.55 else "commit"
        blocker = rng.choice(pool) if kind == "squash" else None
        out.append((kind, tid, ops, blocker))
    return out


def materialize(blocks, include_squashed: bool) -> list[TraceRecord]:
    issued = {}
    records = []
    for block in blocks:
        kind, tid = block[0], block[1]
        issued.setdefault(tid, 0)
        if kind == "switch":
            records.append(TraceRecord(tid, "SWITCH", (f"{block[2]}:0", "ctx")))
            continue
        ops, blocker = block[2], block[3]
        if kind == "squash":
            # The blocker is committed work (the slow branch condition); only
            # the burst between SPEC_BEGIN and SQUASH is speculative.
            records.append(TraceRecord(tid, "LOAD", (blocker,)))
            issued[tid] += 1
            if include_squashed:
                records.append(TraceRecord(tid, "SPEC_BEGIN", ()))
                for op in ops:
                    records.append(TraceRecord(tid, op[0], tuple(op[1:])))
                    issued[tid] += 1
                records.append(TraceRecord(tid, "BARRIER", ()))
                records.append(TraceRecord(tid, "SQUASH", ()))
            records.append(TraceRecord(tid, "COMMIT_TO", (issued[tid],)))
            records.append(TraceRecord(tid, "BARRIER", ()))
        else:
            for op in ops:
                records.append(TraceRecord(tid, op[0], tuple(op[1:])))
                issued[tid] += 1
            records.append(TraceRecord(tid, "COMMIT_TO", (issued[tid],)))
            records.append(TraceRecord(tid, "BARRIER", ()))
    return records


def purity_states(seed: int, **flags):
    """Runs the full script and the squash-free script; returns both
    non-speculative state snapshots."""
    blocks = gen_mixed_blocks(seed)
    full = build_machine(**flags)
    run_trace(full, materialize(blocks, include_squashed=True))
    filtered = build_machine(**flags)
    run_trace(filtered, materialize(blocks, include_squashed=False))
    return full.ns_state_snapshot(), filtered.ns_state_snapshot()


# ------------------------------------------------------- value oracle

def run_value_oracle(seed: int, ops: int = 1000, cores: int = 3, lines: int = 8,
                     audit_every: int = 50) -> int:
    """Random committed multicore store/load script, checked load by load
    against a flat sequential memory model. Returns the number of loads."""
    rng = random.Random(seed)
    m = build_machine(cores=cores)
    for tid in m.threads:
        for i in range(lines):
            m.warm_translation(tid, BASE + i * LINE_SIZE)
    expected = {}
    loads = 0
    for step in range(ops):
        tid = rng.randrange(cores)
        addr = BASE + rng.randrange(lines) * LINE_SIZE
        line = addr // LINE_SIZE
        if rng.random() < 0.4:
            value = rng.randrange(1, 1 << 32)
            tok = m.store(tid, addr, value)
            m.wait(tok)
            m.commit_all(tid)
            m.barrier()
            expected[line] = value
        else:
            tok = m.load(tid, addr)
            m.wait(tok)
            m.commit_all(tid)
            m.barrier()
            loads += 1
            want = expected.get(line, default_memory_value(line))
            assert tok.data == want, (
                f"step {step}: load of line {line:#x} returned {tok.data:#x}, "
                f"sequential memory holds {want:#x}")
        if step % audit_every == 0:
            m.audit()
    m.audit()
    return loads


# --------------------------------------------- interleaving enumeration

INTERLEAVE_OPS = ("load_commit", "load_squash", "store_commit")


def _apply_interleave_op(m: Machine, tid: int, op: str, addr: int, value: int):
    if op == "load_commit":
        tok = m.load(tid, addr)
        m.wait(tok)
        m.commit_all(tid)
        m.barrier()
        return ("load", tok.data)
    if op == "load_squash":
        m.spec_begin(tid)
        m.load(tid, addr)
        m.barrier()  # nacked accesses stay pending; fills land
        m.squash(tid)
        return None
    tok = m.store(tid, addr, value)
    m.wait(tok)
    m.commit_all(tid)
    m.barrier()
    return ("store", value)


def interleavings(a: int, b: int):
    """All merges of sequences 0..a-1 (core 0) and 0..b-1 (core 1)."""
    if a == 0:
        yield (1,) * b
        return
    if b == 0:
        yield (0,) * a
        return
    for rest in interleavings(a - 1, b):
        yield (0,) + rest
    for rest in interleavings(a, b - 1):
        yield (1,) + rest


def run_interleaving(scripts: tuple, order: tuple) -> None:
    """One exhaustive-enumeration run: applies the merged op order, audits
    the coherence invariants throughout, and checks committed load values
    against the sequential memory model."""
    m = build_machine(cores=2)
    m.audit_mode = True
    addr = BASE
    line = addr // LINE_SIZE
    for tid in m.threads:
        m.warm_translation(tid, addr)
    expected = default_memory_value(line)
    cursors = [0, 0]
    for step, who in enumerate(order):
        op = scripts[who][cursors[who]]
        cursors[who] += 1
        result = _apply_interleave_op(m, who, op, addr, value=step + 1)
        if result is None:
            continue
        kind, value = result
        if kind == "store":
            expected = value
        else:
            assert value == expected, (
                f"scripts={scripts} order={order}: committed load saw "
                f"{value}, memory model holds {expected}")
    m.barrier()
    m.audit()
    for tid in m.threads:
        th = m.threads[tid]
        assert not th.rob, "instructions left in flight: no quiescence"
