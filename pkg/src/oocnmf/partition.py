"""1-D column (CNMF) / row (RNMF) partitions and batch geometry.

CNMF: worker ``g`` owns ``A[:, j0:j1]`` and ``H[:, j0:j1]``; ``W`` is
replicated and batches cut the row axis.  RNMF is the transpose: worker
``g`` owns ``A[i0:i1, :]`` and ``W[i0:i1, :]``; ``H`` is replicated and
batches cut the column axis.  Uneven splits give the first ``L mod parts``
pieces one extra index.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .linalg import DEFAULT_BLOCK_ROWS

CNMF = "CNMF"
RNMF = "RNMF"
ITEM = 8  # bytes per f64 / u64


class PlanError(ValueError):
    pass


class InfeasibleBudget(PlanError):
    pass


def split(length, parts):
    """``parts`` contiguous half-open ranges tiling ``[0, length)``."""
    base, extra = divmod(length, parts)
    bounds = []
    lo = 0
    for p in range(parts):
        hi = lo + base + (1 if p < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def choose_strategy(m, n):
    """Column partition when the matrix is wider than tall, row partition otherwise."""
    if m < 1 or n < 1:
        raise PlanError("dimensions must be >= 1")
    return CNMF if n > m else RNMF


@dataclass(frozen=True)
class WorkerSlab:
    rank: int
    a_window: tuple          # (r0, r1, c0, c1)
    w_role: str              # "replicated" | "slab"
    h_role: str
    w_rows: tuple            # rows of W this worker holds
    h_cols: tuple            # columns of H this worker holds


@dataclass(frozen=True)
class PartitionPlan:
    strategy: str
    n_workers: int
    m: int
    n: int
    k: int
    J: int                   # largest per-worker slab extent
    I: int                   # largest batch extent
    n_batches: int
    slabs: tuple             # WorkerSlab per rank
    batches: tuple           # (lo, hi) along the batched axis, shared by all ranks

    def worker(self, rank):
        return self.slabs[rank]

    def batch_windows(self, rank):
        """Global ``(r0, r1, c0, c1)`` A-windows of ``rank``'s batches, in order."""
        r0, r1, c0, c1 = self.slabs[rank].a_window
        if self.strategy == CNMF:
            return [(lo, hi, c0, c1) for lo, hi in self.batches]
        return [(r0, r1, lo, hi) for lo, hi in self.batches]

    def to_dict(self):
        d = asdict(self)
        d["slabs"] = [asdict(s) for s in self.slabs]
        d["batches"] = [list(b) for b in self.batches]
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def make_plan(m, n, k, n_workers, n_batches=1, strategy="auto"):
    if strategy in (None, "auto"):
        strategy = choose_strategy(m, n)
    strategy = strategy.upper()
    if strategy not in (CNMF, RNMF):
        raise PlanError(f"unknown strategy {strategy!r}")
    if min(m, n, k) < 1:
        raise PlanError("m, n, k must be >= 1")
    if n_workers < 1 or n_batches < 1:
        raise PlanError("n_workers and n_batches must be >= 1")
    part_len, batch_len = (n, m) if strategy == CNMF else (m, n)
    if n_workers > part_len:
        raise PlanError(f"{n_workers} workers but only {part_len} slabs along the partitioned axis")
    if n_batches > batch_len:
        raise PlanError(f"{n_batches} batches but only {batch_len} indices along the batched axis")
    parts = split(part_len, n_workers)
    batches = tuple(split(batch_len, n_batches))
    slabs = []
    for g, (lo, hi) in enumerate(parts):
        if strategy == CNMF:
            slabs.append(WorkerSlab(g, (0, m, lo, hi), "replicated", "slab", (0, m), (lo, hi)))
        else:
            slabs.append(WorkerSlab(g, (lo, hi, 0, n), "slab", "replicated", (lo, hi), (0, n)))
    return PartitionPlan(
        strategy=strategy, n_workers=n_workers, m=m, n=n, k=k,
        J=parts[0][1] - parts[0][0], I=batches[0][1] - batches[0][0],
        n_batches=n_batches, slabs=tuple(slabs), batches=batches)


@dataclass(frozen=True)
class MemoryReport:
    """Per-worker byte counts for one plan.  ``peak`` is the modelled high-water mark."""

    a_slab: int
    a_batch: int
    resident_batches: int
    batch_peak: int          # what the chunk store may hold at once
    residual_block: int
    factors: int
    intermediates: int
    peak: int
    budget: int | None
    feasible: bool
    n_batches: int
    full_a: int              # S_A of the whole matrix, dense layout

    @property
    def fixed(self):
        return self.residual_block + self.factors + self.intermediates

    def to_dict(self):
        return asdict(self) | {"fixed": self.fixed}


def _csr_bytes(rows, cols, density):
    nnz = int(-(-density * rows * cols // 1))  # ceil
    return (rows + 1) * ITEM + nnz * 2 * ITEM


def _estimate(m, n, k, slab_len, batch_len, n_batches, strategy, density, n_cb, block_rows, budget):
    I = -(-batch_len // n_batches)
    J = slab_len
    # A batch is I x J (CNMF: rows x slab-cols, RNMF: slab-rows x cols)
    if density >= 1:
        a_batch = I * J * ITEM
        a_slab = batch_len * J * ITEM
    else:
        a_batch = _csr_bytes(I, J, density) if strategy == CNMF else _csr_bytes(J, I, density)
        a_slab = _csr_bytes(batch_len, J, density) if strategy == CNMF else _csr_bytes(J, batch_len, density)
    resident = min(n_cb, n_batches)
    if strategy == CNMF:
        factors = (m * k + k * J) * ITEM
        # WTA, W^T W H (k x J); WTW, HHT (k x k); AHT_p, WHHT_p (I x k)
        intermediates = (2 * k * J + 2 * k * k + 2 * I * k) * ITEM
        residual = min(block_rows, I) * J * ITEM
    else:
        factors = (J * k + k * n) * ITEM
        intermediates = (2 * J * k + 2 * k * k + 2 * k * I) * ITEM
        residual = min(block_rows, J) * I * ITEM
    peak = resident * a_batch + residual + factors + intermediates
    return MemoryReport(
        a_slab=a_slab, a_batch=a_batch, resident_batches=resident, batch_peak=resident * a_batch,
        residual_block=residual, factors=factors, intermediates=intermediates, peak=peak,
        budget=budget, feasible=budget is None or peak <= budget, n_batches=n_batches,
        full_a=m * n * ITEM)


def memory_estimate(plan, density=1.0, budget=None, n_cb=2, block_rows=DEFAULT_BLOCK_ROWS):
    """Model the per-worker footprint of ``plan`` and the smallest feasible batch count.

    Returns ``(report, min_batches)``.  ``report`` describes ``plan`` as
    given; ``min_batches`` is the least ``n_B`` whose modelled peak fits
    ``budget`` (``None`` when no budget is given).  Raises
    ``InfeasibleBudget`` when the factors and fixed intermediates alone
    exceed the budget, i.e. no batch count can help.
    """
    if not (0 < density <= 1):
        raise ValueError("density must be in (0, 1]")
    if budget is not None and budget <= 0:
        raise ValueError("budget must be positive")
    if n_cb < 1:
        raise ValueError("n_cb must be >= 1")
    slab_len = plan.J
    batch_len = plan.m if plan.strategy == CNMF else plan.n
    args = (plan.m, plan.n, plan.k, slab_len, batch_len)
    rest = (plan.strategy, density, n_cb, block_rows, budget)
    report = _estimate(*args, plan.n_batches, *rest)
    if budget is None:
        return report, None
    # peak is nonincreasing in n_B: binary search the smallest fitting one
    if not _estimate(*args, batch_len, *rest).feasible:
        raise InfeasibleBudget(
            f"budget {budget} B too small even with {batch_len} batches "
            f"(factors {report.factors} B, intermediates {report.intermediates} B)")
    lo, hi = 1, batch_len
    while lo < hi:
        mid = (lo + hi) // 2
        if _estimate(*args, mid, *rest).feasible:
            hi = mid
        else:
            lo = mid + 1
    return report, lo


def plan_for_budget(m, n, k, n_workers, budget, strategy="auto", density=1.0, n_cb=2,
                    block_rows=DEFAULT_BLOCK_ROWS):
    """Smallest-``n_B`` plan whose modelled peak fits ``budget``; returns ``(plan, report)``."""
    probe = make_plan(m, n, k, n_workers, 1, strategy)
    _, nb = memory_estimate(probe, density, budget, n_cb, block_rows)
    plan = make_plan(m, n, k, n_workers, nb, probe.strategy)
    report, _ = memory_estimate(plan, density, budget, n_cb, block_rows)
    return plan, report
