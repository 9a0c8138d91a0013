"""PDN1 binary matrix files and Matrix Market interchange.

PDN1 layout (all integers little-endian)::

    magic   8 bytes   b"PDNMF\\x00v1"
    kind    u8        0 = dense, 1 = CSR
    dtype   u8        0 = f64
    rows    u64
    cols    u64
    dense:  rows*cols f64, row-major
    CSR:    nnz u64, row_ptr (rows+1) u64, col_idx nnz u64, values nnz f64
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .linalg import as_csr

MAGIC = b"PDNMF\x00v1"
KIND_DENSE = 0
KIND_CSR = 1
DTYPE_F64 = 0

_HEADER = struct.Struct("<8sBBQQ")
HEADER_SIZE = _HEADER.size  # 26


class FormatError(ValueError):
    """File is not a readable PDN1 / Matrix Market matrix."""


@dataclass(frozen=True)
class Pdn1Header:
    kind: int
    rows: int
    cols: int
    nnz: int | None
    path: str

    @property
    def sparse(self):
        return self.kind == KIND_CSR

    @property
    def shape(self):
        return (self.rows, self.cols)

    # byte offsets of the payload sections
    @property
    def data_offset(self):
        return HEADER_SIZE if self.kind == KIND_DENSE else HEADER_SIZE + 8

    @property
    def ptr_offset(self):
        return HEADER_SIZE + 8

    @property
    def idx_offset(self):
        return self.ptr_offset + 8 * (self.rows + 1)

    @property
    def val_offset(self):
        return self.idx_offset + 8 * self.nnz


def write_pdn1(path, a):
    """Write a dense array or sparse matrix as PDN1."""
    path = os.fspath(path)
    with open(path, "wb") as f:
        if sp.issparse(a):
            a = as_csr(a)
            rows, cols = a.shape
            f.write(_HEADER.pack(MAGIC, KIND_CSR, DTYPE_F64, rows, cols))
            f.write(struct.pack("<Q", a.nnz))
            f.write(a.indptr.astype("<u8").tobytes())
            f.write(a.indices.astype("<u8").tobytes())
            f.write(a.data.astype("<f8").tobytes())
        else:
            a = np.asarray(a, dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"expected a 2-D array, got shape {a.shape}")
            rows, cols = a.shape
            f.write(_HEADER.pack(MAGIC, KIND_DENSE, DTYPE_F64, rows, cols))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path):
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"{path}: truncated header")
        magic, kind, dtype, rows, cols = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if kind not in (KIND_DENSE, KIND_CSR):
            raise FormatError(f"{path}: unknown kind {kind}")
        if dtype != DTYPE_F64:
            raise FormatError(f"{path}: unsupported dtype code {dtype}")
        nnz = None
        if kind == KIND_CSR:
            (nnz,) = struct.unpack("<Q", f.read(8))
    hdr = Pdn1Header(kind, rows, cols, nnz, path)
    expected = (hdr.val_offset + 8 * nnz) if hdr.sparse else HEADER_SIZE + 8 * rows * cols
    if os.path.getsize(path) != expected:
        raise FormatError(f"{path}: size {os.path.getsize(path)} != expected {expected}")
    return hdr


def _read_array(f, offset, count, dtype):
    f.seek(offset)
    buf = f.read(8 * count)
    if len(buf) != 8 * count:
        raise FormatError("truncated payload")
    return np.frombuffer(buf, dtype=dtype).copy()


def read_dense_rows(hdr, r0, r1, c0=0, c1=None):
    """Read ``[r0:r1, c0:c1]`` of a dense PDN1 file, one contiguous run per row."""
    c1 = hdr.cols if c1 is None else c1
    out = np.empty((r1 - r0, c1 - c0), dtype=np.float64)
    with open(hdr.path, "rb") as f:
        if c0 == 0 and c1 == hdr.cols:
            out[:] = _read_array(f, HEADER_SIZE + 8 * r0 * hdr.cols,
                                 (r1 - r0) * hdr.cols, "<f8").reshape(out.shape)
        else:
            for i, r in enumerate(range(r0, r1)):
                out[i] = _read_array(f, HEADER_SIZE + 8 * (r * hdr.cols + c0), c1 - c0, "<f8")
    return out


def read_csr_rows(hdr, r0, r1, c0=0, c1=None):
    """Read rows ``[r0:r1)`` of a CSR PDN1 file, keeping only columns ``[c0:c1)``."""
    c1 = hdr.cols if c1 is None else c1
    with open(hdr.path, "rb") as f:
        ptr = _read_array(f, hdr.ptr_offset + 8 * r0, r1 - r0 + 1, "<u8").astype(np.int64)
        lo, hi = int(ptr[0]), int(ptr[-1])
        idx = _read_array(f, hdr.idx_offset + 8 * lo, hi - lo, "<u8").astype(np.int64)
        val = _read_array(f, hdr.val_offset + 8 * lo, hi - lo, "<f8")
    ptr -= lo
    if c0 != 0 or c1 != hdr.cols:
        keep = (idx >= c0) & (idx < c1)
        row_of = np.repeat(np.arange(r1 - r0), np.diff(ptr))
        new_ptr = np.zeros(r1 - r0 + 1, dtype=np.int64)
        new_ptr[1:] = np.cumsum(np.bincount(row_of[keep], minlength=r1 - r0))
        idx, val, ptr = idx[keep] - c0, val[keep], new_ptr
    return sp.csr_matrix((val, idx, ptr), shape=(r1 - r0, c1 - c0))


def read_pdn1(path):
    hdr = read_header(path)
    if hdr.sparse:
        return read_csr_rows(hdr, 0, hdr.rows)
    return read_dense_rows(hdr, 0, hdr.rows)


def write_mtx(path, a):
    scipy.io.mmwrite(os.fspath(path), a)


def read_mtx(path):
    """Read Matrix Market; coordinate files come back as canonical CSR."""
    try:
        a = scipy.io.mmread(os.fspath(path))
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if sp.issparse(a):
        return as_csr(a)
    return np.ascontiguousarray(a, dtype=np.float64)


def load_matrix(path):
    """Load ``.mtx`` or PDN1 by extension (anything not ``.mtx`` is PDN1)."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.endswith(".mtx"):
        return read_mtx(path)
    return read_pdn1(path)


def save_matrix(path, a):
    path = os.fspath(path)
    if path.endswith(".mtx"):
        write_mtx(path, a)
    else:
        write_pdn1(path, a)
