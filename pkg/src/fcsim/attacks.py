"""Executable side-channel scenarios and the distinguishability leak oracle.

Each scenario runs an identical script for both secret values; only the
victim's speculative, later-squashed behaviour depends on the secret. The
oracle declares a leak exactly when the attacker's observed latency traces
differ between the two runs: the simulator is deterministic, so a single
cycle of difference is a proven channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addr import LINE_SIZE, PAGE_SIZE
from .config import RunConfig, set_key
from .core import TokenState
from .errors import ScriptError, SimError
from .machine import Machine
from .tlb import DomainId, Perms

PROFILES = ("unprotected", "muontrap", "muontrap-clear")

ATTACKER = DomainId(100)
VICTIM = DomainId(200)
SANDBOX_HOST = DomainId(300, 0)
SANDBOX_GUEST = DomainId(300, 1)


@dataclass
class ObservationTrace:
    entries: list[tuple[str, int]] = field(default_factory=list)

    def add(self, label: str, latency: int) -> None:
        self.entries.append((label, latency))

    def __eq__(self, other) -> bool:
        return isinstance(other, ObservationTrace) and self.entries == other.entries


@dataclass
class LeakVerdict:
    leaks: bool
    witness: dict | None = None


@dataclass
class Actor:
    role: str
    core: int
    thread: int
    domain: str


@dataclass
class Scenario:
    name: str
    description: str
    actors: list[Actor]
    configure: callable  # profile -> RunConfig
    script: callable     # (machine, secret, harness) -> None
    expected: dict[str, bool]  # profile -> leaks?


class Harness:
    """Drives one run and collects the attacker-visible latency trace."""

    def __init__(self, machine: Machine):
        self.m = machine
        self.trace = ObservationTrace()

    def committed_load(self, tid: int, vaddr: int) -> int:
        tok = self.m.load(tid, vaddr)
        self.m.wait(tok)
        self.m.commit_all(tid)
        return tok.data

    def committed_ifetch(self, tid: int, vaddr: int) -> None:
        tok = self.m.ifetch(tid, vaddr)
        self.m.wait(tok)
        self.m.commit_all(tid)

    def probe_load(self, tid: int, vaddr: int, label: str) -> None:
        tok = self.m.load(tid, vaddr)
        self.m.wait(tok)
        self.m.commit_all(tid)
        self.trace.add(label, tok.completion_latency)

    def probe_ifetch(self, tid: int, vaddr: int, label: str) -> None:
        tok = self.m.ifetch(tid, vaddr)
        self.m.wait(tok)
        self.m.commit_all(tid)
        self.trace.add(label, tok.completion_latency)

    def probe_store(self, tid: int, vaddr: int, value: int, label: str) -> None:
        tok = self.m.store(tid, vaddr, value)
        self.m.wait(tok)
        self.m.commit_all(tid)
        self.m.wait_complete(tok)
        self.trace.add(label, tok.completion_latency)


def _cfg(profile: str, cores: int = 2, tpc: int = 1, **flags) -> RunConfig:
    cfg = RunConfig()
    cfg.cores = cores
    cfg.threads_per_core = tpc
    cfg.flags.defense = profile
    for key, value in flags.items():
        setattr(cfg.flags, key, value)
    return cfg


def _line(set_idx: int, tag_step: int, num_sets: int, base_line: int = 0) -> int:
    """Byte address of a line in a given cache set with a distinct tag."""
    return (base_line + set_idx + tag_step * num_sets) * LINE_SIZE


# --------------------------------------------------------------------------
# 1. Classic eviction-channel attack through a cache shared across a context
#    switch: the victim's speculative line must not displace primed state.

def _prime_probe_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    sets = m.cfg.caches.l1d.num_sets
    p0 = _line(7, 1, sets, 1 << 20)
    p1 = _line(7, 2, sets, 1 << 20)
    t_hot = _line(7, 3, sets, 1 << 20)
    t_cold = _line(9, 4, sets, 1 << 20)
    s0 = _line(23, 5, sets, 1 << 20)

    m.set_domain(t, ATTACKER)
    for addr in (p0, p1):
        m.warm_translation(t, addr)
    for addr in (t_hot, t_cold, s0):
        m.warm_translation(t, addr, domain=VICTIM)

    h.committed_load(t, p0)
    h.committed_load(t, p1)
    m.barrier()
    m.domain_switch(t, VICTIM, "ctx")

    m.spec_begin(t)
    m.load(t, s0)
    m.load(t, t_hot if secret else t_cold)
    m.barrier()
    m.squash(t)

    m.domain_switch(t, ATTACKER, "ctx")
    h.probe_load(t, p0, "p0")
    h.probe_load(t, p1, "p1")


# --------------------------------------------------------------------------
# 2. Inclusion-policy strawman: an L0 that mirrors its fills into the L1
#    reopens the eviction channel; the shipped non-inclusive L0 does not.
#    The "unprotected" column runs the defended machine with the inclusive
#    test double installed.

def _inclusion_script(m: Machine, secret: int, h: Harness) -> None:
    _prime_probe_script(m, secret, h)


def _inclusion_configure(profile: str) -> RunConfig:
    if profile == "unprotected":
        return _cfg("muontrap", cores=1)
    return _cfg(profile, cores=1)


def _inclusion_setup(m: Machine, profile: str) -> None:
    if profile == "unprotected":
        from .caches import Mesi

        def mirror(thread, side, line_addr, data):
            if side == "d":
                m.force_l1_fill(thread.core, False, line_addr.paddr_line, Mesi.S, data)

        m.on_l0_fill = mirror


# --------------------------------------------------------------------------
# 3. Shared-data coherence channel: a speculative access that would downgrade
#    the attacker's exclusive line changes the attacker's later store cost.

def _shared_data_script(m: Machine, secret: int, h: Harness) -> None:
    vic, att = 0, 1
    x = 0x300000
    y = 0x310000
    blocker = 0x320000
    s0 = 0x330000
    m.set_domain(vic, VICTIM)
    m.set_domain(att, ATTACKER)
    for addr in (x, y, blocker, s0):
        m.warm_translation(vic, addr)
    m.warm_translation(att, x)

    h.committed_load(att, x)
    m.barrier()  # asynchronous exclusive upgrade completes; attacker owns x

    m.load(vic, blocker)      # slow older load keeps the thread's head busy
    m.spec_begin(vic)
    m.load(vic, s0)
    m.load(vic, x if secret else y)
    m.run_until(m.now + 60)   # nack (or fill) delivered, blocker still in flight
    m.squash(vic)
    m.commit_all(vic)
    m.barrier()

    h.probe_store(att, x, 0x5A, "store_x")


# --------------------------------------------------------------------------
# 4. Filter-cache coherency channel: whether a foreign filter cache holds a
#    line must not change anyone else's load timing.

def _fc_coherency_script(m: Machine, secret: int, h: Harness) -> None:
    vic, att = 0, 1
    x = 0x400000
    w = 0x410000
    s0 = 0x420000
    m.set_domain(vic, VICTIM)
    m.set_domain(att, ATTACKER)
    for addr in (x, w, s0):
        m.warm_translation(vic, addr)
    m.warm_translation(att, x)

    m.spec_begin(vic)
    m.load(vic, s0)
    m.load(vic, x if secret else w)
    m.barrier()               # the speculative line now sits wherever it lands

    h.probe_load(att, x, "load_x")
    m.squash(vic)
    m.barrier()


# --------------------------------------------------------------------------
# 5. Instruction-cache channel via a secret-dependent speculative fetch
#    target.

def _icache_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    sets = m.cfg.caches.l1i.num_sets
    p0 = _line(5, 1, sets, 1 << 21)
    p1 = _line(5, 2, sets, 1 << 21)
    t_hot = _line(5, 3, sets, 1 << 21)
    t_cold = _line(11, 4, sets, 1 << 21)
    s0 = _line(29, 5, sets, 1 << 21)

    m.set_domain(t, ATTACKER)
    for addr in (p0, p1):
        m.warm_translation(t, addr, side="i")
    for addr in (t_hot, t_cold):
        m.warm_translation(t, addr, side="i", domain=VICTIM)
    m.warm_translation(t, s0, domain=VICTIM)

    h.committed_ifetch(t, p0)
    h.committed_ifetch(t, p1)
    m.barrier()
    m.domain_switch(t, VICTIM, "ctx")

    m.spec_begin(t)
    m.load(t, s0)
    m.ifetch(t, t_hot if secret else t_cold)
    m.barrier()
    m.squash(t)

    m.domain_switch(t, ATTACKER, "ctx")
    h.probe_ifetch(t, p0, "p0")
    h.probe_ifetch(t, p1, "p1")


# --------------------------------------------------------------------------
# 6. Prefetcher channel: a speculatively trained stride prefetcher pulls the
#    next line into the (non-speculative) L2 where the attacker can time it.

def _prefetch_script(m: Machine, secret: int, h: Harness) -> None:
    vic, att = 0, 1
    region_a = 0x800000
    region_b = 0x900000
    m.set_domain(vic, VICTIM)
    m.set_domain(att, ATTACKER)
    for addr in (region_a, region_b):
        m.warm_translation(vic, addr)
        m.warm_translation(att, addr)

    m.spec_begin(vic)
    base = region_a if secret else region_b
    for i in range(3):
        tok = m.load(vic, base + i * LINE_SIZE)
        m.wait(tok)  # in-order stream, one miss at a time
    m.barrier()      # any prefetch completes
    m.squash(vic)
    m.barrier()

    h.probe_load(att, region_a + 3 * LINE_SIZE, "a3")
    h.probe_load(att, region_b + 3 * LINE_SIZE, "b3")


# --------------------------------------------------------------------------
# 7. TLB prime-and-probe: a speculative translation must not evict primed
#    main-TLB entries.

_TLB_PRIME = 63


def _tlb_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    prime_pages = [0x1000 + i for i in range(_TLB_PRIME)]
    u_present = 0x3000
    u_miss = 0x3001
    for i, vp in enumerate(prime_pages):
        m.map_page(ATTACKER, vp, 0x8000 + i)
    m.map_page(VICTIM, u_present, 0x9000)
    m.map_page(VICTIM, u_miss, 0x9001)

    m.set_domain(t, ATTACKER)
    for i, vp in enumerate(prime_pages):
        h.committed_load(t, vp * PAGE_SIZE)
    m.barrier()
    m.domain_switch(t, VICTIM, "ctx")
    h.committed_load(t, u_present * PAGE_SIZE)
    m.barrier()

    m.spec_begin(t)
    m.load(t, (u_miss if secret else u_present) * PAGE_SIZE)
    m.barrier()
    m.squash(t)
    m.domain_switch(t, ATTACKER, "ctx")

    for i, vp in enumerate(prime_pages):
        h.probe_load(t, vp * PAGE_SIZE, f"v{i}")


# --------------------------------------------------------------------------
# 8. SMT sibling threads: concurrent attacker and victim on one core, no
#    context switch involved.

def _smt_script(m: Machine, secret: int, h: Harness) -> None:
    att, vic = 0, 1
    sets = m.cfg.caches.l1d.num_sets
    p0 = _line(13, 1, sets, 1 << 22)
    p1 = _line(13, 2, sets, 1 << 22)
    t_hot = _line(13, 3, sets, 1 << 22)
    t_cold = _line(17, 4, sets, 1 << 22)
    s0 = _line(31, 5, sets, 1 << 22)

    m.set_domain(att, ATTACKER)
    m.set_domain(vic, VICTIM)
    for addr in (p0, p1):
        m.warm_translation(att, addr)
    for addr in (t_hot, t_cold, s0):
        m.warm_translation(vic, addr)

    h.committed_load(att, p0)
    h.committed_load(att, p1)
    m.barrier()

    m.spec_begin(vic)
    m.load(vic, s0)
    m.load(vic, t_hot if secret else t_cold)
    m.barrier()
    m.squash(vic)

    h.probe_load(att, p0, "p0")
    h.probe_load(att, p1, "p1")


# --------------------------------------------------------------------------
# 9. Early replacement: with an undersized L0, a conflicting speculative line
#    can evict a correct-path line before it commits; the commit-time
#    refetch is transient bus contention the attacker can time, and the
#    squashed line itself is probeable on an unprotected machine.

def _early_replacement_script(m: Machine, secret: int, h: Harness) -> None:
    vic, att = 0, 1
    # The tiny L0 has two one-line sets; p and q1 collide, q0 does not.
    p = 0xA00000            # even line -> set 0
    q1 = 0xA10000           # even line -> set 0, different tag
    q0 = 0xA20040           # odd line  -> set 1
    warm = 0xA30000
    cp = 0xA40000
    m.set_domain(vic, VICTIM)
    m.set_domain(att, ATTACKER)
    for addr in (p, q1, q0):
        m.warm_translation(vic, addr)
    for addr in (p, cp, warm, q1, q0):
        m.warm_translation(att, addr)

    # Shared copy of p keeps the victim's fill out of the exclusive-upgrade
    # path, so a commit with p still resident is bus-silent.
    h.committed_load(att, p)
    m.barrier()

    t0 = m.now
    m.load(vic, p)                       # correct-path, still uncommitted
    m.run_until(t0 + 150)
    m.spec_begin(vic)
    m.load(vic, q1 if secret else q0)    # conflicting iff secret
    m.run_until(t0 + 450)
    m.squash(vic)

    h.committed_load(att, warm)          # positions round-robin arbitration
    m.barrier()

    # Align the attacker's probe with the victim's commit: both bus requests
    # must be pending at the same arbitration tick. The probe's request
    # lands four cycles after issue (L0 miss, main-TLB hit, L1 probe).
    target = m.now + 40
    probe = {}
    m.kernel.schedule_at(target, lambda: m.commit_all(vic), "victim-commit")
    m.kernel.schedule_at(target - 4, lambda: probe.update(cp=m.load(att, cp)),
                         "attacker-probe")
    m.barrier()
    h.trace.add("contention", probe["cp"].latency)
    m.commit_all(att)

    h.probe_load(att, q1, "q1")
    h.probe_load(att, q0, "q0")


def _early_replacement_configure(profile: str) -> RunConfig:
    cfg = _cfg(profile, cores=2)
    cfg.filter.size_bytes = 128
    cfg.filter.ways = 1
    return cfg


# --------------------------------------------------------------------------
# 10. Delayed permission checks: a faulting speculative load must not bring
#     data (or anything derived from it) into any cache.

def _meltdown_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    forbidden_page = 0x5000
    probe_base = 0x6000 * PAGE_SIZE
    m.map_page(ATTACKER, forbidden_page, 0x5000, Perms(read=False, write=False))
    m.set_domain(t, ATTACKER)
    forbidden = forbidden_page * PAGE_SIZE
    m.poke_memory(forbidden // LINE_SIZE, secret)
    m.warm_translation(t, forbidden)
    m.warm_translation(t, probe_base)

    m.spec_begin(t)
    tok = m.load(t, forbidden)
    m.barrier()
    if tok.state is TokenState.RESOLVED:
        # The value escaped the permission check; use it as an index.
        m.load(t, probe_base + (tok.data & 1) * LINE_SIZE)
        m.barrier()
    m.squash(t)

    h.probe_load(t, probe_base, "b0")
    h.probe_load(t, probe_base + LINE_SIZE, "b1")


def _meltdown_configure(profile: str) -> RunConfig:
    cfg = _cfg(profile, cores=1)
    if profile == "unprotected":
        # The vulnerable baseline defers the permission check past the fill.
        cfg.flags.permission_check_before_fill = False
    return cfg


# --------------------------------------------------------------------------
# 11. Presence channel over shared data across a context switch.

def _shared_flush_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    x = 0xB00000
    w = 0xB10000
    m.set_domain(t, VICTIM)
    m.warm_translation(t, x)
    m.warm_translation(t, w)
    m.warm_translation(t, x, domain=ATTACKER)

    m.spec_begin(t)
    m.load(t, x if secret else w)
    m.barrier()
    m.squash(t)
    m.domain_switch(t, ATTACKER, "ctx")
    h.probe_load(t, x, "x")


# --------------------------------------------------------------------------
# 12. Sandbox entry inside one process: the dedicated flush on sandbox entry
#     seals the same presence channel without a context switch.

def _sandbox_script(m: Machine, secret: int, h: Harness) -> None:
    t = 0
    x = 0xC00000
    w = 0xC10000
    m.set_domain(t, SANDBOX_HOST)
    m.warm_translation(t, x)
    m.warm_translation(t, w)
    m.warm_translation(t, x, domain=SANDBOX_GUEST)

    m.spec_begin(t)
    m.load(t, x if secret else w)
    m.barrier()
    m.squash(t)
    m.domain_switch(t, SANDBOX_GUEST, "sandbox")
    h.probe_load(t, x, "x")


# --------------------------------------------------------------------------

def _std_expected() -> dict[str, bool]:
    return {"unprotected": True, "muontrap": False, "muontrap-clear": False}


def _actors_switch(core: int = 0) -> list[Actor]:
    return [Actor("attacker", core, 0, str(ATTACKER)), Actor("victim", core, 0, str(VICTIM))]


def _actors_two_core() -> list[Actor]:
    return [Actor("victim", 0, 0, str(VICTIM)), Actor("attacker", 1, 1, str(ATTACKER))]


SCENARIOS: dict[str, Scenario] = {}


def _register(name, description, actors, configure, script, expected, setup=None):
    SCENARIOS[name] = Scenario(name, description, actors, configure, script, expected)
    SCENARIOS[name].setup = setup  # type: ignore[attr-defined]


_register(
    "spectre_prime_probe",
    "Speculative secret-dependent load evicts primed lines from a shared data cache.",
    _actors_switch(),
    lambda profile: _cfg(profile, cores=1),
    _prime_probe_script,
    _std_expected(),
)
_register(
    "inclusion_policy",
    "An inclusive L0 test double leaks by mirroring speculative fills into the L1; "
    "the shipped non-inclusive, non-exclusive L0 does not.",
    _actors_switch(),
    _inclusion_configure,
    _inclusion_script,
    _std_expected(),
    setup=_inclusion_setup,
)
_register(
    "shared_data_coherence",
    "Speculative downgrade of the attacker's exclusive line changes the attacker's "
    "store latency; nack-delayed downgrades seal it.",
    _actors_two_core(),
    lambda profile: _cfg(profile, cores=2),
    _shared_data_script,
    _std_expected(),
)
_register(
    "filter_cache_coherency",
    "Foreign filter-cache contents must not affect load timing; shared-only grants "
    "with the asynchronous commit-time upgrade seal it.",
    _actors_two_core(),
    lambda profile: _cfg(profile, cores=2),
    _fc_coherency_script,
    _std_expected(),
)
_register(
    "instruction_cache",
    "Secret-dependent speculative fetch target evicts primed instruction lines.",
    _actors_switch(),
    lambda profile: _cfg(profile, cores=1),
    _icache_script,
    _std_expected(),
)
_register(
    "prefetcher",
    "A prefetcher trained on speculative loads pulls the next line into the L2; "
    "commit-time training seals it.",
    _actors_two_core(),
    lambda profile: _cfg(profile, cores=2),
    _prefetch_script,
    _std_expected(),
)
_register(
    "tlb_prime_probe",
    "A speculative translation evicts primed main-TLB entries; the filter TLB seals it.",
    _actors_switch(),
    lambda profile: _cfg(profile, cores=1),
    _tlb_script,
    _std_expected(),
)
_register(
    "smt_multithreading",
    "Concurrent sibling threads share one core; per-thread filter caches isolate them.",
    [Actor("attacker", 0, 0, str(ATTACKER)), Actor("victim", 0, 1, str(VICTIM))],
    lambda profile: _cfg(profile, cores=1, tpc=2),
    _smt_script,
    _std_expected(),
)
_register(
    "early_replacement",
    "Undersized L0: a conflicting speculative line evicts an uncommitted correct-path "
    "line, making the commit refetch observable. A documented residual channel; "
    "sealed by blocking eviction of uncommitted data.",
    _actors_two_core(),
    _early_replacement_configure,
    _early_replacement_script,
    {"unprotected": True, "muontrap": True, "muontrap-clear": False},
)
_register(
    "meltdown_style",
    "Delayed permission checking lets a faulting load's value steer a second fill; "
    "checking before any fill seals it.",
    [Actor("attacker", 0, 0, str(ATTACKER))],
    _meltdown_configure,
    _meltdown_script,
    _std_expected(),
)
_register(
    "shared_data_flush",
    "Presence of speculatively loaded shared data survives a context switch unless "
    "the filter cache is flushed.",
    _actors_switch(),
    lambda profile: _cfg(profile, cores=1),
    _shared_flush_script,
    _std_expected(),
)
_register(
    "sandbox_within_process",
    "Sandbox entry inside one process flushes the filter structures behind a "
    "non-speculation barrier.",
    [Actor("victim", 0, 0, str(SANDBOX_HOST)), Actor("attacker", 0, 0, str(SANDBOX_GUEST))],
    lambda profile: _cfg(profile, cores=1),
    _sandbox_script,
    _std_expected(),
)


def run_scenario(scenario: Scenario, secret: int, profile: str,
                 overrides: dict | None = None) -> ObservationTrace:
    if profile not in PROFILES:
        raise ScriptError(f"unknown defense profile {profile!r}")
    cfg = scenario.configure(profile)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, str(value))
    machine = Machine(cfg)
    harness = Harness(machine)
    setup = getattr(scenario, "setup", None)
    if setup is not None:
        setup(machine, profile)
    try:
        scenario.script(machine, secret, harness)
        machine.barrier()
    except SimError as exc:
        raise ScriptError(f"{scenario.name}[{profile}, secret={secret}]: {exc}") from exc
    return harness.trace


def leak_oracle(scenario: Scenario, profile: str,
                overrides: dict | None = None) -> LeakVerdict:
    trace0 = run_scenario(scenario, 0, profile, overrides)
    trace1 = run_scenario(scenario, 1, profile, overrides)
    if trace0 == trace1:
        return LeakVerdict(False)
    return LeakVerdict(True, witness={"secret0": trace0.entries, "secret1": trace1.entries})


def attack_matrix(names: list[str] | None = None,
                  profiles: list[str] | None = None) -> dict:
    names = names or list(SCENARIOS)
    profiles = profiles or list(PROFILES)
    report: dict = {"scenarios": {}}
    for name in names:
        scenario = SCENARIOS[name]
        row: dict = {"description": scenario.description, "profiles": {}}
        for profile in profiles:
            verdict = leak_oracle(scenario, profile)
            row["profiles"][profile] = {
                "leaks": verdict.leaks,
                "expected_leaks": scenario.expected.get(profile),
                "witness": verdict.witness,
            }
        if name == "early_replacement" and "muontrap" in profiles:
            blocked = leak_oracle(scenario, "muontrap",
                                  {"flags.block_uncommitted_eviction": "true"})
            row["profiles"]["muontrap+block_uncommitted_eviction"] = {
                "leaks": blocked.leaks,
                "expected_leaks": False,
                "witness": blocked.witness,
            }
        report["scenarios"][name] = row
    return report
