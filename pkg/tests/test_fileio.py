import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oocnmf import fileio
from oocnmf.fileio import FormatError
from strategies import csr_matrices, dims, nonneg


def test_header_layout(tmp_path):
    p = tmp_path / "a.pdn1"
    fileio.write_pdn1(p, np.arange(6.0).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:8] == b"PDNMF\x00v1"
    assert raw[8] == 0 and raw[9] == 0
    assert int.from_bytes(raw[10:18], "little") == 2
    assert int.from_bytes(raw[18:26], "little") == 3
    assert np.array_equal(np.frombuffer(raw[26:], "<f8"), np.arange(6.0))


def test_csr_layout(tmp_path):
    a = sp.csr_matrix(np.array([[0.0, 1.5], [2.5, 0.0], [0.0, 0.0]]))
    p = tmp_path / "s.pdn1"
    fileio.write_pdn1(p, a)
    raw = p.read_bytes()
    assert raw[8] == 1
    body = raw[26:]
    nnz = int.from_bytes(body[:8], "little")
    assert nnz == 2
    ptr = np.frombuffer(body[8:8 + 4 * 8], "<u8")
    idx = np.frombuffer(body[40:56], "<u8")
    val = np.frombuffer(body[56:], "<f8")
    assert ptr.tolist() == [0, 1, 2, 2] and idx.tolist() == [1, 0] and val.tolist() == [1.5, 2.5]


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.pdn1"
    p.write_bytes(b"NOTMAGIC" + bytes(18))
    with pytest.raises(FormatError):
        fileio.read_header(p)
    q = tmp_path / "short.pdn1"
    fileio.write_pdn1(q, np.ones((4, 4)))
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(FormatError):
        fileio.read_header(q)


@settings(max_examples=60)
@given(st.data())
def test_dense_window_reads(tmp_path_factory, data):
    m, n = data.draw(dims), data.draw(dims)
    a = data.draw(nonneg((m, n)))
    p = tmp_path_factory.mktemp("d") / "a.pdn1"
    fileio.write_pdn1(p, a)
    hdr = fileio.read_header(p)
    r0 = data.draw(st.integers(0, m - 1))
    r1 = data.draw(st.integers(r0 + 1, m))
    c0 = data.draw(st.integers(0, n - 1))
    c1 = data.draw(st.integers(c0 + 1, n))
    assert np.array_equal(fileio.read_dense_rows(hdr, r0, r1, c0, c1), a[r0:r1, c0:c1])


@settings(max_examples=60)
@given(st.data())
def test_csr_window_reads(tmp_path_factory, data):
    m, n = data.draw(dims), data.draw(dims)
    a = data.draw(csr_matrices((m, n)))
    p = tmp_path_factory.mktemp("s") / "a.pdn1"
    fileio.write_pdn1(p, a)
    hdr = fileio.read_header(p)
    r0 = data.draw(st.integers(0, m - 1))
    r1 = data.draw(st.integers(r0 + 1, m))
    c0 = data.draw(st.integers(0, n - 1))
    c1 = data.draw(st.integers(c0 + 1, n))
    got = fileio.read_csr_rows(hdr, r0, r1, c0, c1)
    want = a[r0:r1, c0:c1]
    assert got.shape == want.shape
    assert np.array_equal(got.indptr, want.indptr)
    assert np.array_equal(got.indices, want.indices)
    assert np.array_equal(got.data, want.data)


def test_mtx_roundtrip(tmp_path, rng):
    a = sp.random(20, 13, density=0.3, random_state=3, format="csr")
    p = tmp_path / "a.mtx"
    fileio.save_matrix(p, a)
    b = fileio.load_matrix(p)
    assert sp.isspmatrix_csr(b)
    assert np.array_equal(a.toarray(), b.toarray())
    d = rng.random((4, 3))
    fileio.save_matrix(tmp_path / "d.mtx", d)
    assert np.array_equal(fileio.load_matrix(tmp_path / "d.mtx"), d)
