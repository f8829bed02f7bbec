"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class PastTickError(SimError):
    """An event was scheduled before the current tick."""


class CapacityFullError(SimError):
    """ROB, load-queue or store-queue capacity would be exceeded."""


class OutOfOrderCommitError(SimError):
    """Commit was requested for an instruction that is not the oldest in flight."""


class InFlightRemainsError(SimError):
    """A domain switch was requested while instructions are still in flight."""


class PageFaultError(SimError):
    """No translation exists for the virtual page in the current domain."""


class PermissionFaultError(SimError):
    """The translation exists but denies the requested access kind."""


class SpeculativeFillForbiddenError(SimError):
    """A speculative access tried to fill a non-speculative cache."""


class SpeculativeExclusiveForbiddenError(SimError):
    """A speculative access tried to acquire a line in exclusive state."""


class ScriptError(SimError):
    """A scenario or trace step violated an API precondition."""


class ParseError(SimError):
    """A trace or config file failed to parse.

    Carries the offending line number when known.
    """

    def __init__(self, message, line_no=None):
        super().__init__(message if line_no is None else f"line {line_no}: {message}")
        self.line_no = line_no


class ConfigError(SimError):
    """An invalid run configuration."""


class BadParamsError(SimError):
    """Invalid workload-generator or sweep parameters."""


class DeadlockError(SimError):
    """The simulation cannot make progress (usually a script bug)."""
