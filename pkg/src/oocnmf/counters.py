"""Per-phase wall time, flop estimates and memory peaks."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

PHASES = ("h_update", "w_update", "allreduce", "error_check", "io")


@dataclass
class PhaseCounters:
    seconds: dict = field(default_factory=lambda: {p: 0.0 for p in PHASES})
    flops: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    total_seconds: float = 0.0
    peak_resident_bytes: int = 0
    bytes_read: int = 0
    batch_loads: int = 0

    def add_flops(self, phase, n):
        self.flops[phase] = self.flops.get(phase, 0) + int(n)

    def to_dict(self):
        return asdict(self)


class PhaseTimer:
    """Exclusive phase timing: entering a nested phase pauses its parent.

    Phase times therefore never double count, and their sum stays within
    the enclosing ``run()`` wall time.
    """

    def __init__(self, counters):
        self.counters = counters
        self._stack = []
        self._mark = None
        self._t0 = None

    def _charge(self, now):
        if self._stack:
            ph = self._stack[-1]
            self.counters.seconds[ph] = self.counters.seconds.get(ph, 0.0) + (now - self._mark)
        self._mark = now

    @contextmanager
    def phase(self, name):
        self._charge(time.perf_counter())
        self._stack.append(name)
        try:
            yield
        finally:
            self._charge(time.perf_counter())
            self._stack.pop()

    @contextmanager
    def run(self):
        t0 = time.perf_counter()
        self._mark = t0
        try:
            yield
        finally:
            self.counters.total_seconds += time.perf_counter() - t0
