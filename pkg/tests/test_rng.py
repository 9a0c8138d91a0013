import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from oocnmf import rng
from oocnmf.serial import init_factors


def test_same_seed_same_draw():
    w1, h1 = init_factors(30, 20, 4, 7)
    w2, h2 = init_factors(30, 20, 4, 7)
    assert np.array_equal(w1, w2) and np.array_equal(h1, h2)
    w3, _ = init_factors(30, 20, 4, 8)
    assert not np.array_equal(w1, w3)


def test_range_and_streams_differ():
    w, h = init_factors(50, 50, 50, 0)
    assert w.min() >= 0 and w.max() < 1 and h.min() >= 0 and h.max() < 1
    assert not np.array_equal(w, h.T)


def test_roughly_uniform():
    x = rng.uniform_window(3, 0, 200, 200)
    assert abs(x.mean() - 0.5) < 0.01
    assert abs(x.var() - 1 / 12) < 0.005


@given(st.integers(0, 2**64 - 1), st.integers(1, 40), st.integers(1, 9), st.data())
def test_slab_equals_slice_of_full_draw(seed, m, k, data):
    r0 = data.draw(st.integers(0, m - 1))
    r1 = data.draw(st.integers(r0 + 1, m))
    full = rng.uniform_window(seed, rng.STREAM_W, m, k)
    assert np.array_equal(rng.uniform_window(seed, rng.STREAM_W, m, k, r0, r1, 0, k), full[r0:r1])
