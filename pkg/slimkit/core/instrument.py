"""
Allocation and FLOP accounting

Tapes and attention kernels bill into whichever AllocStats / FlopLedger is
current for the running context. `tracking()` installs fresh ones for the
duration of a run, so independent runs on separate threads never share
counters.
"""
import contextvars
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple


@dataclass
class AllocStats:
    """
    Live/peak byte counter for activation storage

    Only intermediates saved for backward and kernel workspaces pass
    through here. Parameters, inputs, boundary buffers and gradients are
    persistent state and are never billed.
    """
    baseline: int = 0
    live_bytes: int = 0
    peak_bytes: int = 0
    clamp_events: int = 0

    def __post_init__(self):
        self.live_bytes = max(self.live_bytes, self.baseline)
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def alloc(self, nbytes: int) -> None:
        self.live_bytes += int(nbytes)
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def free(self, nbytes: int) -> None:
        self.live_bytes -= int(nbytes)

    @contextmanager
    def workspace(self, nbytes: int) -> Iterator[None]:
        self.alloc(nbytes)
        try:
            yield
        finally:
            self.free(nbytes)

    def clamped(self, count: int) -> None:
        self.clamp_events += int(count)

    def reset(self) -> None:
        self.live_bytes = self.baseline
        self.peak_bytes = self.baseline
        self.clamp_events = 0

    @property
    def peak_activation_bytes(self) -> int:
        return self.peak_bytes - self.baseline


@dataclass
class FlopLedger:
    """
    Per-category operation counts

    Counting convention: one multiply-add, add, multiply or division is
    one unit; slicing, concatenation and stop-gradient are free. Costs are
    charged per token so that splitting a sequence never changes totals.
    """
    counts: Counter = field(default_factory=Counter)
    current: str = "forward"

    def add(self, category: str, flops: int) -> None:
        if flops:
            self.counts[category] += int(flops)

    def charge(self, flops: int) -> None:
        self.add(self.current, flops)

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        previous = self.current
        self.current = name
        try:
            yield
        finally:
            self.current = previous

    def snapshot(self) -> Dict[str, int]:
        return {k: int(v) for k, v in sorted(self.counts.items())}

    def reset(self) -> None:
        self.counts.clear()
        self.current = "forward"


_stats: contextvars.ContextVar = contextvars.ContextVar("slimkit_alloc_stats", default=None)
_ledger: contextvars.ContextVar = contextvars.ContextVar("slimkit_flop_ledger", default=None)

_fallback_stats = AllocStats()
_fallback_ledger = FlopLedger()


def current_stats() -> AllocStats:
    stats = _stats.get()
    return stats if stats is not None else _fallback_stats


def current_ledger() -> FlopLedger:
    ledger = _ledger.get()
    return ledger if ledger is not None else _fallback_ledger


@contextmanager
def tracking(
    stats: Optional[AllocStats] = None,
    ledger: Optional[FlopLedger] = None,
) -> Iterator[Tuple[AllocStats, FlopLedger]]:
    """Install counters for the enclosed block and yield them"""
    stats = stats if stats is not None else AllocStats()
    ledger = ledger if ledger is not None else FlopLedger()
    stats_token = _stats.set(stats)
    ledger_token = _ledger.set(ledger)
    try:
        yield stats, ledger
    finally:
        _stats.reset(stats_token)
        _ledger.reset(ledger_token)
