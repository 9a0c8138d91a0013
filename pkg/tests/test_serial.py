import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oocnmf import fileio
from oocnmf.linalg import NegativeEntryError, ZeroNormError
from oocnmf.serial import DivergenceError, NmfConfig, init_factors, nmf_serial
from oracles import mu_reference


def test_config_validation():
    for bad in (dict(k=0), dict(k=2, eta=-1), dict(k=2, max_iters=0), dict(k=2, error_check_interval=0),
                dict(k=2, init="from_files")):
        with pytest.raises(ValueError):
            NmfConfig(**bad)


def test_matches_textbook_updates(rng):
    a = rng.random((30, 20))
    w0, h0 = init_factors(30, 20, 3, 5)
    res = nmf_serial(a, NmfConfig(k=3, eta=0, max_iters=25, seed=5))
    w, h = mu_reference(a, w0, h0, 25)
    assert np.allclose(res.W, w, rtol=1e-10) and np.allclose(res.H, h, rtol=1e-10)


def test_fixed_point_from_files(tmp_path, rng):
    w0, h0 = rng.random((12, 3)), rng.random((3, 9))
    a = w0 @ h0
    fileio.write_pdn1(tmp_path / "w.pdn1", w0)
    fileio.write_pdn1(tmp_path / "h.pdn1", h0)
    cfg = NmfConfig(k=3, eta=0, max_iters=1, init="from_files",
                    init_w=str(tmp_path / "w.pdn1"), init_h=str(tmp_path / "h.pdn1"))
    res = nmf_serial(a, cfg)
    assert res.final_error <= 1e-12
    assert np.allclose(res.W, w0, rtol=1e-10) and np.allclose(res.H, h0, rtol=1e-10)


def test_zero_matrix():
    with pytest.raises(ZeroNormError):
        nmf_serial(np.zeros((5, 4)), NmfConfig(k=2))


def test_negative_input():
    a = np.ones((3, 3))
    a[1, 2] = -1
    with pytest.raises(NegativeEntryError):
        nmf_serial(a, NmfConfig(k=1))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_guard():
    a = np.ones((4, 4))
    a[0, 0] = np.inf
    with pytest.raises((DivergenceError, ValueError)):
        nmf_serial(a, NmfConfig(k=1, max_iters=3, error_check_interval=1))


def test_check_cadence_and_stop(rng):
    a = rng.random((20, 15))
    res = nmf_serial(a, NmfConfig(k=2, eta=0, max_iters=23, error_check_interval=10))
    assert [i for i, _ in res.error_trace] == [10, 20, 23]
    assert res.iterations_run == 23 and not res.converged
    loose = nmf_serial(a, NmfConfig(k=2, eta=0.9, max_iters=100, error_check_interval=5))
    assert loose.converged and loose.iterations_run == 5


def test_bit_reproducible(rng):
    a = rng.random((25, 18))
    r1 = nmf_serial(a, NmfConfig(k=3, max_iters=40, seed=9))
    r2 = nmf_serial(a, NmfConfig(k=3, max_iters=40, seed=9))
    assert np.array_equal(r1.W, r2.W) and r1.error_trace == r2.error_trace


def test_counters(rng):
    res = nmf_serial(rng.random((30, 30)), NmfConfig(k=4, max_iters=20))
    c = res.counters
    assert all(v >= 0 for v in c.seconds.values())
    assert sum(c.seconds.values()) <= c.total_seconds * 1.05
    assert c.flops["w_update"] > 0 and c.flops["h_update"] > 0


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 30), st.integers(1, 5),
       st.booleans())
def test_monotone_and_nonnegative(seed, m, n, k, sparse):
    rng = np.random.default_rng(seed)
    a = rng.random((m, n))
    if sparse:
        import scipy.sparse as sp
        a = sp.csr_matrix(a * (rng.random((m, n)) < 0.4))
        if a.nnz == 0:
            return
    res = nmf_serial(a, NmfConfig(k=k, eta=0, max_iters=60, error_check_interval=1, seed=seed))
    errs = [e for _, e in res.error_trace]
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))
    assert res.W.min() >= 0 and res.H.min() >= 0
