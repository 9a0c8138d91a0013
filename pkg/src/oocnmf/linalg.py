"""Dense / CSR matrix kernels used by the multiplicative updates.

Dense matrices are plain C-ordered ``float64`` numpy arrays.  Sparse matrices
are ``scipy.sparse.csr_matrix`` with canonical structure (sorted, unique
column indices, no explicit zeros).  ``MatrixRef`` is a window onto either
kind, so partition slabs and batches can be passed around without copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_EPS = 1e-12

# rows of W @ H materialised at once by the residual kernel
DEFAULT_BLOCK_ROWS = 256


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NegativeEntryError(ValueError):
    """A matrix that must be nonnegative has a negative entry."""

    def __init__(self, row, col, value):
        super().__init__(f"negative entry {value!r} at ({row}, {col})")
        self.row, self.col, self.value = row, col, value


class ZeroNormError(ValueError):
    """Relative error is undefined for an all-zero matrix."""


def is_sparse(a):
    return sp.issparse(a)


def as_dense(a):
    """Return ``a`` as a C-ordered float64 array (no copy when it already is)."""
    return np.ascontiguousarray(a, dtype=np.float64)


def as_csr(a):
    """Return a canonical float64 CSR copy of ``a`` (dense or sparse)."""
    out = sp.csr_matrix(a, dtype=np.float64, copy=True)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def validate_csr(a):
    """Check the structural CSR invariants; raise ``ValueError`` on the first violation."""
    if not sp.isspmatrix_csr(a):
        raise ValueError(f"expected csr_matrix, got {type(a).__name__}")
    rows, cols = a.shape
    ptr, idx = a.indptr, a.indices
    if len(ptr) != rows + 1 or ptr[0] != 0 or ptr[-1] != len(idx) or len(idx) != len(a.data):
        raise ValueError("row_ptr does not span the stored entries")
    if np.any(np.diff(ptr) < 0):
        raise ValueError("row_ptr is not nondecreasing")
    if len(idx) and (idx.min() < 0 or idx.max() >= cols):
        raise ValueError("column index out of range")
    for r in range(rows):
        seg = idx[ptr[r]:ptr[r + 1]]
        if np.any(np.diff(seg) <= 0):
            raise ValueError(f"column indices of row {r} are not strictly increasing")
    if np.any(a.data == 0):
        raise ValueError("explicit zero stored")
    if np.any(a.data < 0):
        raise ValueError("negative value stored")


@dataclass(frozen=True)
class MatrixRef:
    """A half-open ``[r0, r1) x [c0, c1)`` window onto a dense or CSR matrix."""

    base: object
    r0: int = 0
    r1: int | None = None
    c0: int = 0
    c1: int | None = None

    def __post_init__(self):
        rows, cols = self.base.shape
        r1 = rows if self.r1 is None else self.r1
        c1 = cols if self.c1 is None else self.c1
        if not (0 <= self.r0 <= r1 <= rows and 0 <= self.c0 <= c1 <= cols):
            raise ShapeError(
                f"window [{self.r0}:{r1}, {self.c0}:{c1}] outside matrix of shape {self.base.shape}")
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "c1", c1)

    @property
    def shape(self):
        return (self.r1 - self.r0, self.c1 - self.c0)

    @property
    def sparse(self):
        return sp.issparse(self.base)

    @property
    def full(self):
        return self.shape == self.base.shape

    def view(self):
        """Dense: a zero-copy numpy view.  CSR: the base itself or a sliced CSR."""
        if self.full:
            return self.base
        return self.base[self.r0:self.r1, self.c0:self.c1]

    def sub(self, r0, r1, c0, c1):
        """Window relative to this one."""
        return MatrixRef(self.base, self.r0 + r0, self.r0 + r1, self.c0 + c0, self.c0 + c1)


def resolve(a):
    """Turn a ``MatrixRef``/array/CSR into something the numeric kernels accept."""
    if isinstance(a, MatrixRef):
        return a.view()
    if sp.issparse(a):
        return a if sp.isspmatrix_csr(a) else a.tocsr()
    return np.asarray(a, dtype=np.float64)


def _check_inner(a_shape, b_shape, what="matmul"):
    if a_shape[1] != b_shape[0]:
        raise ShapeError(f"{what}: shapes {a_shape} and {b_shape} do not conform")


def matmul(a, b):
    """``a @ b`` for a dense or CSR ``a`` and a dense ``b``.

    CSR operands go through scipy's row-wise kernel, which accumulates the
    stored entries of each row in ascending column order.
    """
    a = resolve(a)
    b = resolve(b)
    _check_inner(a.shape, b.shape)
    if sp.issparse(a):
        return np.ascontiguousarray(a @ b)
    return a @ b


def t_matmul(w, a):
    """``w.T @ a`` without transposing a CSR ``a``.

    For sparse ``a`` every stored ``a[i, j]`` adds ``a[i, j] * w[i, :]`` into
    column ``j`` of the result (rows visited in ascending order).
    """
    w = resolve(w)
    a = resolve(a)
    if w.shape[0] != a.shape[0]:
        raise ShapeError(f"t_matmul: shapes {w.shape}^T and {a.shape} do not conform")
    if sp.issparse(a):
        # csr.T is a CSC view; scipy's csc kernel scatters row-by-row.
        return np.ascontiguousarray((a.T @ w).T)
    return w.T @ a


def gram_t(a):
    """``a.T @ a`` with the lower triangle mirrored from the upper one."""
    a = resolve(a)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"gram_t: empty operand {a.shape}")
    if sp.issparse(a):
        a = a.toarray()
    g = a.T @ a
    iu = np.triu_indices(g.shape[0], 1)
    g[(iu[1], iu[0])] = g[iu]
    return g


def squared_norm(a):
    a = resolve(a)
    if sp.issparse(a):
        return float(np.sum(np.square(a.data)))
    return float(np.sum(np.square(a)))


def frobenius_norm(a):
    return math.sqrt(squared_norm(a))


def hadamard_update(target, numer, denom, epsilon=DEFAULT_EPS):
    """In place: ``target <- target * numer / (denom + epsilon)``."""
    if not (target.shape == numer.shape == denom.shape):
        raise ShapeError(
            f"hadamard_update: shapes {target.shape}, {numer.shape}, {denom.shape} differ")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    target *= numer
    target /= denom + epsilon


def squared_residual(a, w, h, block_rows=DEFAULT_BLOCK_ROWS):
    """``||a - w @ h||_F^2``, materialising at most ``block_rows`` rows of ``w @ h``."""
    a = resolve(a)
    w = resolve(w)
    h = resolve(h)
    if a.shape != (w.shape[0], h.shape[1]) or w.shape[1] != h.shape[0]:
        raise ShapeError(f"residual: A{a.shape} vs W{w.shape} @ H{h.shape}")
    block_rows = max(1, int(block_rows))
    total = 0.0
    for r0 in range(0, a.shape[0], block_rows):
        r1 = min(r0 + block_rows, a.shape[0])
        blk = a[r0:r1]
        if sp.issparse(blk):
            blk = blk.toarray()
        diff = blk - w[r0:r1] @ h
        total += float(np.sum(np.square(diff)))
    return total


def block_rows_for_budget(n_cols, budget_bytes):
    """Largest residual block height whose dense ``W @ H`` block fits the budget."""
    if budget_bytes is None:
        return DEFAULT_BLOCK_ROWS
    return max(1, int(budget_bytes // (8 * max(1, n_cols))))


def relative_error(a, w, h, block_rows=DEFAULT_BLOCK_ROWS):
    """``||A - WH||_F / ||A||_F``; raises ``ZeroNormError`` for an all-zero ``A``."""
    normsq = squared_norm(a)
    if normsq == 0.0:
        raise ZeroNormError("relative error undefined: ||A||_F == 0")
    return math.sqrt(squared_residual(a, w, h, block_rows)) / math.sqrt(normsq)


def validate_nonnegative(a):
    """Raise ``NegativeEntryError`` at the first (row-major) negative entry."""
    ref = a if isinstance(a, MatrixRef) else MatrixRef(a)
    m = ref.view()
    if sp.issparse(m):
        m = m.tocsr()
        bad = np.flatnonzero(m.data < 0)
        if len(bad):
            pos = bad[0]
            row = int(np.searchsorted(m.indptr, pos, side="right") - 1)
            raise NegativeEntryError(ref.r0 + row, ref.c0 + int(m.indices[pos]), float(m.data[pos]))
        if np.any(np.isnan(m.data)):
            raise ValueError("NaN entry")
        return
    m = np.asarray(m)
    neg = np.argwhere(m < 0)
    if len(neg):
        r, c = neg[0]
        raise NegativeEntryError(ref.r0 + int(r), ref.c0 + int(c), float(m[r, c]))
    if np.isnan(m).any():
        raise ValueError("NaN entry")


def nbytes(a):
    """Resident size of a dense array or CSR matrix."""
    if sp.issparse(a):
        return int(a.data.nbytes + a.indices.nbytes + a.indptr.nbytes)
    return int(np.asarray(a).nbytes)
