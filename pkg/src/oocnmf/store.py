"""Budgeted batch staging for the observation matrix.

A ``ChunkStore`` hands out windows of ``A`` as batches, keeping the bytes
of resident batches under ``budget_bytes`` and their number under ``n_cb``.
Released batches stay resident until space is needed and are then evicted
least-recently-released first.  An optional single I/O thread reads the
next batch ahead of time; prefetched bytes count against the budget from
the moment they are reserved.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import count

import numpy as np
import scipy.sparse as sp

from . import fileio
from .linalg import MatrixRef, nbytes as _nbytes


class StoreError(RuntimeError):
    pass


class BudgetError(StoreError):
    pass


@dataclass
class StoreConfig:
    budget_bytes: int | None = None     # None: unlimited
    n_cb: int = 2
    prefetch: bool = False


@dataclass
class StoreCounters:
    loads: int = 0
    hits: int = 0
    evictions: int = 0
    bytes_read: int = 0
    resident_bytes: int = 0
    peak_resident_bytes: int = 0
    peak_resident_batches: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class Batch:
    id: int
    window: tuple
    ref: MatrixRef
    nbytes: int
    in_use: bool = True
    _future: object = field(default=None, repr=False)

    @property
    def matrix(self):
        return self.ref.view()


class ChunkStore:
    def __init__(self, source, budget_bytes=None, n_cb=2, prefetch=False):
        if budget_bytes is not None and budget_bytes <= 0:
            raise BudgetError(f"budget must be positive, got {budget_bytes}")
        if n_cb < 1:
            raise ValueError("n_cb must be >= 1")
        self.budget = budget_bytes
        self.n_cb = n_cb
        self.counters = StoreCounters()
        self._ids = count()
        self._resident = OrderedDict()   # id -> Batch, insertion order
        self._released = OrderedDict()   # window -> Batch, in release order
        self._io = ThreadPoolExecutor(1, thread_name_prefix="chunkstore-io") if prefetch else None
        if isinstance(source, (str, os.PathLike)):
            self.backing = "file"
            self.header = fileio.read_header(source)
            self.shape = self.header.shape
            self.sparse = self.header.sparse
            self._mem = None
        else:
            self.backing = "in_memory"
            self.header = None
            if sp.issparse(source):
                source = source.tocsr()
            else:
                source = np.ascontiguousarray(source, dtype=np.float64)
            self._mem = source
            self.shape = source.shape
            self.sparse = sp.issparse(source)

    # -- sizing ----------------------------------------------------------------
    def _check_window(self, window):
        r0, r1, c0, c1 = window
        rows, cols = self.shape
        if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
            raise StoreError(f"window {window} outside matrix of shape {self.shape}")

    def window_nbytes(self, window):
        """Bytes a batch for ``window`` occupies once resident."""
        r0, r1, c0, c1 = window
        if not self.sparse:
            return (r1 - r0) * (c1 - c0) * 8
        if self._mem is not None:
            ptr = self._mem.indptr
            idx = self._mem.indices[ptr[r0]:ptr[r1]]
            nnz = int(np.count_nonzero((idx >= c0) & (idx < c1)))
            itemsize = self._mem.indices.itemsize
        else:
            nnz = fileio.read_csr_rows(self.header, r0, r1, c0, c1).nnz
            itemsize = 8
        return (r1 - r0 + 1) * itemsize + nnz * (8 + itemsize)

    # -- reading ---------------------------------------------------------------
    def _read(self, window):
        r0, r1, c0, c1 = window
        if self._mem is not None:
            if not self.sparse:
                return MatrixRef(self._mem, r0, r1, c0, c1)
            return MatrixRef(self._mem[r0:r1, c0:c1])
        if self.sparse:
            return MatrixRef(fileio.read_csr_rows(self.header, r0, r1, c0, c1))
        return MatrixRef(fileio.read_dense_rows(self.header, r0, r1, c0, c1))

    def _evict_one(self, keep_pending=False):
        if keep_pending:
            # read-ahead must not displace another batch that is still unclaimed
            key = next((w for w, b in self._released.items() if b._future is None), None)
            if key is None:
                return False
            victim = self._released.pop(key)
        elif self._released:
            _, victim = self._released.popitem(last=False)
        else:
            return False
        if victim._future is not None:
            victim._future.result()
        del self._resident[victim.id]
        self.counters.resident_bytes -= victim.nbytes
        self.counters.evictions += 1
        return True

    def _admit(self, size, window, keep_pending=False):
        if self.budget is not None and size > self.budget:
            raise BudgetError(f"batch {window} needs {size} B, budget is {self.budget} B")
        while (len(self._resident) >= self.n_cb
               or (self.budget is not None and self.counters.resident_bytes + size > self.budget)):
            if not self._evict_one(keep_pending):
                raise BudgetError(
                    f"cannot stage {window} ({size} B): {len(self._resident)} batches "
                    f"({self.counters.resident_bytes} B) in use, n_cb={self.n_cb}, budget={self.budget}")

    def _insert(self, batch):
        self._resident[batch.id] = batch
        c = self.counters
        c.resident_bytes += batch.nbytes
        c.peak_resident_bytes = max(c.peak_resident_bytes, c.resident_bytes)
        c.peak_resident_batches = max(c.peak_resident_batches, len(self._resident))

    def load_batch(self, window):
        """Stage ``A[r0:r1, c0:c1]`` and return it as an in-use ``Batch``."""
        window = tuple(int(x) for x in window)
        self._check_window(window)
        cached = self._released.get(window)
        if cached is not None:
            if cached._future is not None:
                # prefetched: data is read now, counted as a load
                cached.ref = cached._future.result()
                cached._future = None
                del self._released[window]
                cached.in_use = True
                return cached
            if self.backing == "in_memory":
                del self._released[window]
                cached.in_use = True
                self.counters.hits += 1
                return cached
            # file-backed copies are re-read rather than reused
            del self._released[window]
            del self._resident[cached.id]
            self.counters.resident_bytes -= cached.nbytes
            self.counters.evictions += 1
        size = self.window_nbytes(window)
        self._admit(size, window)
        batch = Batch(next(self._ids), window, self._read(window), size)
        self.counters.loads += 1
        self.counters.bytes_read += size
        self._insert(batch)
        return batch

    def prefetch(self, window):
        """Start reading ``window`` in the background if it fits without evicting in-use batches."""
        if self._io is None:
            return False
        window = tuple(int(x) for x in window)
        self._check_window(window)
        if window in self._released:
            return False
        size = self.window_nbytes(window)
        try:
            self._admit(size, window, keep_pending=True)
        except BudgetError:
            return False
        batch = Batch(next(self._ids), window, None, size, in_use=False)
        batch._future = self._io.submit(self._read, window)
        self.counters.loads += 1
        self.counters.bytes_read += size
        self._insert(batch)
        self._released[window] = batch
        return True

    def release_batch(self, batch):
        if self._resident.get(batch.id) is not batch or not batch.in_use:
            raise StoreError(f"batch {batch.id} {batch.window} is not an in-use batch of this store")
        batch.in_use = False
        self._released[batch.window] = batch

    def in_use(self):
        return [b for b in self._resident.values() if b.in_use]

    def close(self):
        if self._io is not None:
            self._io.shutdown(wait=True)
            self._io = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_store(source, budget_bytes=None, n_cb=2, largest_batch_bytes=None, prefetch=False):
    """Open a store over an array, CSR matrix or PDN1 path.

    ``largest_batch_bytes``, when given, is checked against the budget up
    front so a hopeless configuration fails before any work is done.
    """
    if isinstance(source, (str, os.PathLike)) and not os.path.exists(source):
        raise FileNotFoundError(source)
    store = ChunkStore(source, budget_bytes, n_cb, prefetch)
    if budget_bytes is not None and largest_batch_bytes is not None and largest_batch_bytes > budget_bytes:
        store.close()
        raise BudgetError(f"largest batch ({largest_batch_bytes} B) exceeds budget ({budget_bytes} B)")
    return store
