"""Deterministic multicore cache-hierarchy simulator with a speculative
filter-cache defense and an executable side-channel attack harness."""

from .config import RunConfig
from .machine import Machine
from .tlb import DomainId, Perms

__version__ = "0.1.0"

__all__ = ["RunConfig", "Machine", "DomainId", "Perms", "__version__"]
