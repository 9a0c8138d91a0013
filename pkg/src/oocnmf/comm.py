"""Deterministic all-reduce-sum among ``N`` workers.

Every backend returns the same bits: buffers are summed on one node in
ascending rank order (rank 0 first) and the result is handed back to all
ranks, whatever order the workers arrive in.  Each handle numbers its
collectives; ranks whose sequence, operation or phase disagree get a
``CollectiveMismatch`` and the group is poisoned.

Backends: ``loopback`` (N=1), ``threads`` (all ranks in one process) and
``tcp`` (see :mod:`oocnmf.tcp`).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TIMEOUT = 60.0

PHASE_TAGS = {
    "user": 0,
    "h_update": 1,
    "w_update": 2,
    "error_check": 3,
    "gather": 4,
    "barrier": 5,
    "debug": 6,
    "setup": 7,
}
TAG_NAMES = {v: k for k, v in PHASE_TAGS.items()}


class CommError(RuntimeError):
    pass


class CollectiveTimeout(CommError):
    pass


class GroupPoisoned(CommError):
    pass


class CollectiveMismatch(CommError):
    pass


def rank_order_sum(buffers):
    """``((b0 + b1) + b2) + ...`` -- the reference reduction every backend reproduces."""
    out = np.array(buffers[0], dtype=np.float64, copy=True)
    for b in buffers[1:]:
        out += b
    return out


@dataclass
class CollectiveRecord:
    seq: int
    op: str
    phase: str
    shape: tuple
    nbytes: int
    seconds: float


@dataclass
class CollectiveStats:
    calls: int = 0
    bytes: int = 0
    seconds: float = 0.0
    calls_by_phase: dict = field(default_factory=dict)
    bytes_by_phase: dict = field(default_factory=dict)
    seconds_by_phase: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def record(self, rec):
        self.calls += 1
        self.bytes += rec.nbytes
        self.seconds += rec.seconds
        p = rec.phase
        self.calls_by_phase[p] = self.calls_by_phase.get(p, 0) + 1
        self.bytes_by_phase[p] = self.bytes_by_phase.get(p, 0) + rec.nbytes
        self.seconds_by_phase[p] = self.seconds_by_phase.get(p, 0.0) + rec.seconds
        self.records.append(rec)

    def since(self, n_calls):
        """Records appended after the first ``n_calls`` calls."""
        return self.records[n_calls:]

    def to_dict(self, with_records=False):
        d = {
            "calls": self.calls,
            "bytes": self.bytes,
            "seconds": self.seconds,
            "calls_by_phase": dict(self.calls_by_phase),
            "bytes_by_phase": dict(self.bytes_by_phase),
            "seconds_by_phase": dict(self.seconds_by_phase),
        }
        if with_records:
            d["records"] = [
                {"seq": r.seq, "op": r.op, "phase": r.phase, "shape": list(r.shape),
                 "nbytes": r.nbytes, "seconds": r.seconds}
                for r in self.records
            ]
        return d


class Handle:
    """One rank's endpoint of a group.  Owned by a single worker; not thread-safe."""

    def __init__(self, rank, size):
        self.rank = rank
        self.size = size
        self.stats = CollectiveStats()
        self._seq = 0

    def _exchange(self, seq, op, phase, buf):
        raise NotImplementedError

    def _collective(self, op, phase, buf):
        if phase not in PHASE_TAGS:
            raise ValueError(f"unknown phase tag {phase!r}")
        seq = self._seq
        self._seq += 1
        t0 = time.perf_counter()
        out = self._exchange(seq, op, phase, buf)
        nbytes = 0 if buf is None else buf.nbytes
        shape = () if buf is None else buf.shape
        self.stats.record(CollectiveRecord(seq, op, phase, shape, nbytes, time.perf_counter() - t0))
        return out

    def all_reduce_sum(self, buf, phase_tag="user"):
        """Elementwise sum of ``buf`` over all ranks, reduced in ascending rank order."""
        buf = np.ascontiguousarray(buf, dtype=np.float64)
        if buf.ndim != 2:
            raise ValueError(f"all_reduce_sum expects a 2-D buffer, got shape {buf.shape}")
        return self._collective("allreduce", phase_tag, buf)

    def barrier(self, phase_tag="barrier"):
        self._collective("barrier", phase_tag, None)

    def close(self):
        pass


class LoopbackHandle(Handle):
    def __init__(self):
        super().__init__(0, 1)

    def _exchange(self, seq, op, phase, buf):
        return None if buf is None else buf.copy()


class _ThreadRendezvous:
    """Shared meeting point for the ``threads`` backend."""

    def __init__(self, size, timeout):
        self.size = size
        self.timeout = timeout
        self.cv = threading.Condition()
        self.pending = {}
        self.done = {}
        self.poisoned = None

    def poison(self, exc):
        with self.cv:
            if self.poisoned is None:
                self.poisoned = exc
            self.cv.notify_all()

    def _check(self):
        if self.poisoned is not None:
            raise GroupPoisoned(f"group poisoned: {self.poisoned}") from self.poisoned

    def meet(self, rank, seq, op, phase, buf):
        deadline = time.monotonic() + self.timeout
        with self.cv:
            self._check()
            slot = self.pending.setdefault(seq, {})
            slot[rank] = (op, phase, buf)
            if len(slot) == self.size:
                del self.pending[seq]
                try:
                    result = self._reduce(seq, slot)
                except CommError as exc:
                    self.poisoned = exc
                    self.cv.notify_all()
                    raise
                self.done[seq] = [result, self.size]
                self.cv.notify_all()
            while seq not in self.done:
                self._check()
                left = deadline - time.monotonic()
                if left <= 0:
                    exc = CollectiveTimeout(
                        f"rank {rank}: collective #{seq} ({op}/{phase}) timed out after "
                        f"{self.timeout}s; arrived ranks {sorted(self.pending.get(seq, {}))}")
                    self.poisoned = exc
                    self.cv.notify_all()
                    raise exc
                self.cv.wait(left)
            entry = self.done[seq]
            entry[1] -= 1
            if entry[1] == 0:
                del self.done[seq]
            return None if entry[0] is None else entry[0].copy()

    def _reduce(self, seq, slot):
        ops = {r: (op, ph) for r, (op, ph, _) in slot.items()}
        first = ops[0]
        if any(v != first for v in ops.values()):
            raise CollectiveMismatch(f"collective #{seq}: ranks disagree on operation/phase: {ops}")
        if first[0] == "barrier":
            return None
        shapes = {r: b.shape for r, (_, _, b) in slot.items()}
        if len(set(shapes.values())) != 1:
            raise CollectiveMismatch(f"collective #{seq}: buffer shapes differ across ranks: {shapes}")
        return rank_order_sum([slot[r][2] for r in range(self.size)])


class ThreadHandle(Handle):
    def __init__(self, rank, rendezvous):
        super().__init__(rank, rendezvous.size)
        self._rv = rendezvous

    def _exchange(self, seq, op, phase, buf):
        return self._rv.meet(self.rank, seq, op, phase, buf)

    def poison(self, exc):
        self._rv.poison(exc)


@dataclass
class CommGroup:
    n_workers: int
    backend: str
    handles: list

    def run(self, fn, *args, **kwargs):
        """Call ``fn(handle, *args, **kwargs)`` on every local handle, one thread each.

        Returns the per-rank results in rank order.  If any rank raises, the
        group is poisoned (so blocked peers fail fast) and the lowest-rank
        original exception is re-raised.
        """
        if len(self.handles) == 1:
            return [fn(self.handles[0], *args, **kwargs)]
        results = [None] * len(self.handles)
        errors = [None] * len(self.handles)

        def body(i, h):
            try:
                results[i] = fn(h, *args, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors[i] = exc
                poison = getattr(h, "poison", None)
                if poison is not None:
                    poison(exc)

        threads = [threading.Thread(target=body, args=(i, h), daemon=True)
                   for i, h in enumerate(self.handles)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        real = [e for e in errors if e is not None and not isinstance(e, GroupPoisoned)]
        if real:
            raise real[0]
        if any(errors):
            raise next(e for e in errors if e is not None)
        return results

    def close(self):
        for h in self.handles:
            h.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_group(n_workers, backend="threads", endpoints=None, rank=None,
                timeout=DEFAULT_TIMEOUT, group_id=0):
    """Create a group of ``n_workers`` ranks.

    ``loopback`` needs ``n_workers == 1``.  ``threads`` returns all
    handles in this process.  ``tcp`` needs ``n_workers`` endpoints
    (``"host:port"``; rank 0's is the rendezvous) and returns either this
    process's single handle (``rank`` given) or all handles connected over
    local sockets (``rank=None``, mainly for tests).
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if backend == "loopback":
        if n_workers != 1:
            raise ValueError("loopback backend supports exactly one worker")
        return CommGroup(1, backend, [LoopbackHandle()])
    if backend == "threads":
        rv = _ThreadRendezvous(n_workers, timeout)
        return CommGroup(n_workers, backend, [ThreadHandle(r, rv) for r in range(n_workers)])
    if backend == "tcp":
        from . import tcp
        return tcp.spawn_tcp_group(n_workers, endpoints, rank, timeout, group_id)
    raise ValueError(f"unknown backend {backend!r}")
