"""Run configuration: dataclass blocks, validation, and the key=value text format.

Defaults reproduce the reference machine: 32KiB/2-way/1-cycle L1I,
64KiB/2-way/2-cycle L1D, 2MiB/8-way/20-cycle shared L2, 2KiB/4-way/1-cycle
filter caches, 64-entry split main TLBs, 192-entry ROB with 32-entry
load/store queues, and a fixed 80-cycle memory latency.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .addr import LINE_SIZE, LINES_PER_PAGE
from .errors import ConfigError

DEFENSE_PROFILES = ("unprotected", "muontrap", "muontrap-clear")


@dataclass
class CacheLevelConfig:
    size_bytes: int
    ways: int
    hit_latency: int
    mshrs: int = 4

    @property
    def num_lines(self) -> int:
        return self.size_bytes // LINE_SIZE

    @property
    def num_sets(self) -> int:
        return self.num_lines // self.ways

    def validate(self, name: str) -> None:
        if self.size_bytes <= 0 or self.ways <= 0 or self.hit_latency <= 0:
            raise ConfigError(f"{name}: size, ways and hit latency must be positive")
        if self.size_bytes % (self.ways * LINE_SIZE) != 0:
            raise ConfigError(f"{name}: size must be divisible by ways * line size")
        if self.mshrs <= 0:
            raise ConfigError(f"{name}: need at least one MSHR")


@dataclass
class CacheConfig:
    l1i: CacheLevelConfig = field(default_factory=lambda: CacheLevelConfig(32 * 1024, 2, 1))
    l1d: CacheLevelConfig = field(default_factory=lambda: CacheLevelConfig(64 * 1024, 2, 2))
    l2: CacheLevelConfig = field(default_factory=lambda: CacheLevelConfig(2 * 1024 * 1024, 8, 20, mshrs=16))
    memory_latency: int = 80

    def validate(self) -> None:
        self.l1i.validate("l1i")
        self.l1d.validate("l1d")
        self.l2.validate("l2")
        if self.memory_latency <= 0:
            raise ConfigError("memory latency must be positive")


@dataclass
class FilterConfig:
    size_bytes: int = 2048
    ways: int = 4
    hit_latency: int = 1
    mshrs: int = 4

    @property
    def num_lines(self) -> int:
        return self.size_bytes // LINE_SIZE

    @property
    def num_sets(self) -> int:
        return self.num_lines // self.ways

    def validate(self) -> None:
        if self.size_bytes % (self.ways * LINE_SIZE) != 0:
            raise ConfigError("filter cache size must be divisible by ways * line size")
        if self.num_sets > LINES_PER_PAGE:
            # Index bits must come from the page offset so virtual and
            # physical indexing agree.
            raise ConfigError("filter cache cannot have more sets than lines per page")
        if self.hit_latency != 1:
            raise ConfigError("filter cache hit latency is fixed at one cycle")


@dataclass
class TlbConfig:
    main_entries: int = 64
    filter_entries: int = 8

    def validate(self) -> None:
        if self.main_entries <= 0 or self.filter_entries <= 0:
            raise ConfigError("TLB sizes must be positive")


@dataclass
class CoreConfig:
    rob_entries: int = 192
    lq_entries: int = 32
    sq_entries: int = 32

    def validate(self) -> None:
        if min(self.rob_entries, self.lq_entries, self.sq_entries) <= 0:
            raise ConfigError("core queue sizes must be positive")


@dataclass
class Flags:
    defense: str = "muontrap"
    parallel_l0_l1: bool = False
    clear_on_misspeculate: bool = False
    block_uncommitted_eviction: bool = False
    permission_check_before_fill: bool = True

    def validate(self) -> None:
        if self.defense not in DEFENSE_PROFILES:
            raise ConfigError(f"unknown defense profile {self.defense!r}")


@dataclass
class RunConfig:
    core: CoreConfig = field(default_factory=CoreConfig)
    caches: CacheConfig = field(default_factory=CacheConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    tlb: TlbConfig = field(default_factory=TlbConfig)
    flags: Flags = field(default_factory=Flags)
    cores: int = 4
    threads_per_core: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.cores <= 0 or self.threads_per_core <= 0:
            raise ConfigError("need at least one core and one thread per core")
        self.core.validate()
        self.caches.validate()
        self.filter.validate()
        self.tlb.validate()
        self.flags.validate()

    @property
    def num_threads(self) -> int:
        return self.cores * self.threads_per_core

    def copy(self) -> "RunConfig":
        return from_dict(to_dict(self))


_SECTIONS = {
    "core": ("core", CoreConfig),
    "caches.l1i": ("caches.l1i", CacheLevelConfig),
    "caches.l1d": ("caches.l1d", CacheLevelConfig),
    "caches.l2": ("caches.l2", CacheLevelConfig),
    "filter": ("filter", FilterConfig),
    "tlb": ("tlb", TlbConfig),
    "flags": ("flags", Flags),
}


def _resolve(cfg: RunConfig, dotted: str):
    """Returns (owner_object, field_name) for a dotted config key."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section {dotted!r}")
        obj = getattr(obj, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    return obj, name


def _parse_value(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text.strip(), 0)
        except ValueError as exc:
            raise ConfigError(f"expected an integer, got {text!r}") from exc
    return text.strip()


def set_key(cfg: RunConfig, dotted: str, value: str) -> None:
    obj, name = _resolve(cfg, dotted)
    setattr(obj, name, _parse_value(getattr(obj, name), value))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in _flatten(data):
        obj, name = _resolve(cfg, key)
        setattr(obj, name, value)
    return cfg


def _flatten(data: dict, prefix: str = ""):
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, dotted + ".")
        else:
            yield dotted, value


def to_text(cfg: RunConfig) -> str:
    lines = ["# simulator run configuration"]
    for key, value in sorted(_flatten(to_dict(cfg))):
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for idx, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {idx}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def profile_config(cfg: RunConfig) -> RunConfig:
    """Normalizes a config for its defense profile.

    The muontrap-clear profile is muontrap plus clear-on-misspeculate; the
    flag is forced on so a profile name alone fully determines behaviour.
    """
    out = cfg.copy()
    if out.flags.defense == "muontrap-clear":
        out.flags.clear_on_misspeculate = True
    out.validate()
    return out
