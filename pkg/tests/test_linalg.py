import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oocnmf import linalg
from oocnmf.linalg import MatrixRef, NegativeEntryError, ShapeError, ZeroNormError
from oracles import bf_gram, bf_matmul, bf_squared_residual, dense
from strategies import dims, maybe_sparse, nonneg


def test_matmul_identity_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(linalg.matmul(np.eye(2), a), a)
    assert np.array_equal(linalg.matmul(sp.csr_matrix(np.eye(2)), a), a)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_t_matmul_matches_transpose_product(rng):
    w = rng.random((9, 3))
    a = sp.random(9, 5, density=0.4, random_state=1, format="csr")
    assert np.allclose(linalg.t_matmul(w, a), w.T @ a.toarray(), rtol=1e-14, atol=0)


def test_validate_nonnegative_examples():
    linalg.validate_nonnegative(np.eye(2))
    with pytest.raises(NegativeEntryError) as exc:
        linalg.validate_nonnegative(np.array([[-1.0]]))
    assert (exc.value.row, exc.value.col) == (0, 0)
    m = sp.csr_matrix(np.array([[0.0, 2.0], [0.0, -3.0]]))
    with pytest.raises(NegativeEntryError) as exc:
        linalg.validate_nonnegative(m)
    assert (exc.value.row, exc.value.col, exc.value.value) == (1, 1, -3.0)


def test_validate_nonnegative_reports_global_coordinates():
    a = np.ones((6, 6))
    a[4, 5] = -2.0
    with pytest.raises(NegativeEntryError) as exc:
        linalg.validate_nonnegative(MatrixRef(a, 3, 6, 2, 6))
    assert (exc.value.row, exc.value.col) == (4, 5)


def test_matrixref_window_bounds():
    a = np.zeros((4, 5))
    with pytest.raises(ShapeError):
        MatrixRef(a, 0, 5, 0, 5)
    ref = MatrixRef(a, 1, 3, 2, 5)
    assert ref.shape == (2, 3)
    assert np.shares_memory(ref.view(), a)
    assert MatrixRef(a).view() is a
    assert ref.sub(0, 1, 1, 2).shape == (1, 1)


def test_relative_error_zero_norm():
    with pytest.raises(ZeroNormError):
        linalg.relative_error(np.zeros((3, 3)), np.ones((3, 1)), np.ones((1, 3)))


def test_validate_csr_rejects_bad_structure():
    good = sp.csr_matrix(np.array([[1.0, 0, 2.0], [0, 3.0, 0]]))
    linalg.validate_csr(good)
    bad = good.copy()
    bad.indices = np.array([2, 0, 1], dtype=bad.indices.dtype)
    with pytest.raises(ValueError):
        linalg.validate_csr(bad)
    explicit_zero = sp.csr_matrix((np.array([0.0]), np.array([0]), np.array([0, 1])), shape=(1, 2))
    with pytest.raises(ValueError):
        linalg.validate_csr(explicit_zero)


@pytest.mark.parametrize("shape", [(512, 512), (300, 77), (1, 9)])
@pytest.mark.parametrize("block_rows", [1, 64, 256, 1000])
def test_streamed_residual_matches_dense(shape, block_rows, rng):
    m, n = shape
    a, w, h = rng.random((m, n)), rng.random((m, 5)), rng.random((5, n))
    dense_res = float(np.sum((a - w @ h) ** 2))
    got = linalg.squared_residual(a, w, h, block_rows)
    assert abs(got - dense_res) <= 1e-10 * dense_res


@settings(max_examples=100)
@given(st.data())
def test_gram_symmetric_and_psd(data):
    m, k = data.draw(dims), data.draw(dims)
    a = data.draw(maybe_sparse((m, k)))
    g = linalg.gram_t(a)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-10 * max(1.0, np.abs(g).max())
    assert np.allclose(g, bf_gram(a), rtol=1e-12, atol=0)


@settings(max_examples=100)
@given(st.data(), st.floats(1e-16, 1.0))
def test_hadamard_preserves_nonnegativity(data, eps):
    shape = (data.draw(dims), data.draw(dims))
    t, num, den = (data.draw(nonneg(shape)) for _ in range(3))
    linalg.hadamard_update(t, num, den, eps)
    assert np.all(t >= 0)


@settings(max_examples=50)
@given(st.data())
def test_matmul_bit_reproducible(data):
    m, p, n = data.draw(dims), data.draw(dims), data.draw(dims)
    a = data.draw(maybe_sparse((m, p)))
    b = data.draw(nonneg((p, n)))
    r1 = linalg.matmul(a, b)
    r2 = linalg.matmul(a.copy(), b.copy())
    assert np.array_equal(r1, r2)
    assert np.allclose(r1, bf_matmul(a, b), rtol=1e-12, atol=0)


@settings(max_examples=50)
@given(st.data())
def test_residual_on_windows(data):
    m, n, k = data.draw(dims), data.draw(dims), data.draw(dims)
    a = data.draw(maybe_sparse((m, n)))
    w, h = data.draw(nonneg((m, k))), data.draw(nonneg((k, n)))
    r0 = data.draw(st.integers(0, m - 1))
    ref = MatrixRef(a, r0, m, 0, n)
    got = linalg.squared_residual(ref, w[r0:], h, block_rows=2)
    want = bf_squared_residual(dense(a)[r0:], w[r0:], h)
    assert abs(got - want) <= 1e-12 * max(want, 1e-300) or got == want
