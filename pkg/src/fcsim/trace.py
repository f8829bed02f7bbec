"""Line-oriented trace format and the trace runner.

One step per line: ``<thread> <op> <args>``. Ops: LOAD vaddr, STORE vaddr
value, IFETCH vaddr, SPEC_BEGIN, SQUASH, COMMIT_TO inst_id, SWITCH
domain cause, BARRIER. Numbers accept 0x prefixes; '#' starts a comment.
Instruction ids are implicit: each LOAD/STORE/IFETCH on a thread takes the
next id, starting at 1.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParseError, ScriptError, SimError
from .machine import Machine
from .tlb import DomainId

_OPS = {"LOAD": 1, "STORE": 2, "IFETCH": 1, "SPEC_BEGIN": 0, "SQUASH": 0,
        "COMMIT_TO": 1, "SWITCH": 2, "BARRIER": 0}

_CAUSES = {"ctx", "syscall", "sandbox"}


@dataclass
class TraceRecord:
    thread: int
    op: str
    args: tuple

    def format(self) -> str:
        parts = [str(self.thread), self.op]
        for arg in self.args:
            if isinstance(arg, str):
                parts.append(arg)
            elif self.op == "COMMIT_TO":
                parts.append(str(arg))
            else:
                parts.append(f"{arg:#x}")
        return " ".join(parts)


def format_trace(records: list[TraceRecord]) -> str:
    return "\n".join(r.format() for r in records) + "\n"


def parse_trace(text: str) -> list[TraceRecord]:
    records = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"expected '<thread> <op> ...', got {raw!r}", line_no)
        try:
            thread = int(parts[0], 0)
        except ValueError:
            raise ParseError(f"bad thread id {parts[0]!r}", line_no) from None
        op = parts[1].upper()
        if op not in _OPS:
            raise ParseError(f"unknown op {parts[1]!r}", line_no)
        argv = parts[2:]
        if len(argv) != _OPS[op]:
            raise ParseError(f"{op} takes {_OPS[op]} argument(s), got {len(argv)}", line_no)
        if op == "SWITCH":
            if argv[1] not in _CAUSES:
                raise ParseError(f"unknown switch cause {argv[1]!r}", line_no)
            args = (argv[0], argv[1])
        else:
            try:
                args = tuple(int(a, 0) for a in argv)
            except ValueError:
                raise ParseError(f"bad numeric argument in {raw!r}", line_no) from None
        records.append(TraceRecord(thread, op, args))
    return records


def run_trace(machine: Machine, records: list[TraceRecord]) -> dict:
    """Executes a parsed trace to quiescence; returns the stats snapshot."""
    for idx, rec in enumerate(records, start=1):
        try:
            _apply(machine, rec)
        except SimError as exc:
            raise ScriptError(f"trace step {idx} ({rec.op}): {exc}") from exc
    machine.drain()
    return machine.stats_snapshot()


def _apply(machine: Machine, rec: TraceRecord) -> None:
    tid = rec.thread
    if rec.op == "LOAD":
        machine.load(tid, rec.args[0])
    elif rec.op == "STORE":
        machine.store(tid, rec.args[0], rec.args[1])
    elif rec.op == "IFETCH":
        machine.ifetch(tid, rec.args[0])
    elif rec.op == "SPEC_BEGIN":
        machine.spec_begin(tid)
    elif rec.op == "SQUASH":
        machine.squash(tid)
    elif rec.op == "COMMIT_TO":
        machine.commit_to(tid, rec.args[0])
    elif rec.op == "SWITCH":
        machine.domain_switch(tid, DomainId.parse(rec.args[0]), rec.args[1])
    elif rec.op == "BARRIER":
        machine.barrier()
    else:  # pragma: no cover
        raise ScriptError(f"unhandled op {rec.op}")
