"""Synthetic workload generators producing deterministic traces."""

from __future__ import annotations

import random

from .addr import LINE_SIZE
from .errors import BadParamsError
from .trace import TraceRecord

KINDS = ("stride", "pointer_chase", "random", "shared_producer_consumer")

_DEFAULT_BASE = 0x1000000


def gen_workload(kind: str, params: dict | None = None, seed: int = 0) -> list[TraceRecord]:
    params = dict(params or {})
    if kind == "stride":
        return _gen_stride(params)
    if kind == "pointer_chase":
        return _gen_pointer_chase(params, seed)
    if kind == "random":
        return _gen_random(params, seed)
    if kind == "shared_producer_consumer":
        return _gen_shared(params, seed)
    raise BadParamsError(f"unknown workload kind {kind!r} (choose from {KINDS})")


def _int_param(params: dict, name: str, default: int, minimum: int = 1) -> int:
    value = params.pop(name, default)
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise BadParamsError(f"parameter {name} must be an integer") from None
    if value < minimum:
        raise BadParamsError(f"parameter {name} must be >= {minimum}")
    return value


def _check_leftover(params: dict) -> None:
    if params:
        raise BadParamsError(f"unknown parameters: {sorted(params)}")


def _batched_loads(addrs: list[int], batch: int, thread: int = 0) -> list[TraceRecord]:
    records = []
    issued = 0
    for i, addr in enumerate(addrs):
        records.append(TraceRecord(thread, "LOAD", (addr,)))
        issued += 1
        if (i + 1) % batch == 0 or i + 1 == len(addrs):
            records.append(TraceRecord(thread, "COMMIT_TO", (issued,)))
            records.append(TraceRecord(thread, "BARRIER", ()))
    return records


def _gen_stride(params: dict) -> list[TraceRecord]:
    count = _int_param(params, "count", 1024)
    stride = _int_param(params, "stride", 8)
    base = _int_param(params, "base", _DEFAULT_BASE, minimum=0)
    batch = _int_param(params, "batch", 8)
    _check_leftover(params)
    addrs = [base + i * stride for i in range(count)]
    return _batched_loads(addrs, batch)


def _gen_pointer_chase(params: dict, seed: int) -> list[TraceRecord]:
    lines = _int_param(params, "lines", 16)
    count = _int_param(params, "count", 512)
    base = _int_param(params, "base", _DEFAULT_BASE, minimum=0)
    _check_leftover(params)
    rng = random.Random(seed)
    order = list(range(lines))
    rng.shuffle(order)
    # Serial dependent chain: each load commits before the next issues.
    records = []
    pos = 0
    for i in range(count):
        addr = base + order[pos] * LINE_SIZE
        records.append(TraceRecord(0, "LOAD", (addr,)))
        records.append(TraceRecord(0, "COMMIT_TO", (i + 1,)))
        pos = (pos + 1) % lines
    records.append(TraceRecord(0, "BARRIER", ()))
    return records


def _gen_random(params: dict, seed: int) -> list[TraceRecord]:
    lines = _int_param(params, "lines", 64)
    count = _int_param(params, "count", 2048)
    base = _int_param(params, "base", _DEFAULT_BASE, minimum=0)
    batch = _int_param(params, "batch", 8)
    _check_leftover(params)
    rng = random.Random(seed)
    addrs = [base + rng.randrange(lines) * LINE_SIZE for _ in range(count)]
    return _batched_loads(addrs, batch)


def _gen_shared(params: dict, seed: int) -> list[TraceRecord]:
    lines = _int_param(params, "lines", 8)
    count = _int_param(params, "count", 128)
    base = _int_param(params, "base", _DEFAULT_BASE, minimum=0)
    _check_leftover(params)
    rng = random.Random(seed)
    records = []
    produced = 0
    consumed = 0
    for i in range(count):
        line = base + rng.randrange(lines) * LINE_SIZE
        produced += 1
        records.append(TraceRecord(0, "STORE", (line, i + 1)))
        records.append(TraceRecord(0, "COMMIT_TO", (produced,)))
        records.append(TraceRecord(0, "BARRIER", ()))
        consumed += 1
        records.append(TraceRecord(1, "LOAD", (line,)))
        records.append(TraceRecord(1, "COMMIT_TO", (consumed,)))
        records.append(TraceRecord(1, "BARRIER", ()))
    return records


def mlp_trace(lines: int = 4, rounds: int = 64, base: int = _DEFAULT_BASE) -> list[TraceRecord]:
    """Memory-level-parallel working set: every round issues one load to each
    of ``lines`` distinct cache lines back to back, then commits the batch.
    Exercises how an undersized filter cache drops uncommitted lines."""
    records = []
    issued = 0
    for _ in range(rounds):
        for i in range(lines):
            records.append(TraceRecord(0, "LOAD", (base + i * LINE_SIZE,)))
            issued += 1
        records.append(TraceRecord(0, "COMMIT_TO", (issued,)))
        records.append(TraceRecord(0, "BARRIER", ()))
    return records
