"""Counter-based uniform generator for factor initialisation.

Entry ``(i, j)`` of an ``rows x cols`` matrix drawn under ``(seed, stream)``
is ``splitmix64(key ^ (i * cols + j))`` mapped to ``[0, 1)`` through its top
53 bits, where ``key = splitmix64(seed) ^ splitmix64(stream)``.  Any window
of the matrix can be produced without generating the rest, so a worker's
slab of W or H equals the same slab of the full serial draw bit for bit.
"""

import numpy as np

STREAM_W = 0
STREAM_H = 1

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    """SplitMix64 finaliser over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed, stream):
    s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return splitmix64(s) ^ splitmix64(np.uint64(stream) * np.uint64(0x632BE59BD9B4E019))


def uniform_window(seed, stream, rows, cols, r0=0, r1=None, c0=0, c1=None):
    """Window ``[r0:r1, c0:c1]`` of the ``rows x cols`` uniform(0,1) draw."""
    r1 = rows if r1 is None else r1
    c1 = cols if c1 is None else c1
    if not (0 <= r0 <= r1 <= rows and 0 <= c0 <= c1 <= cols):
        raise ValueError("window out of range")
    with np.errstate(over="ignore"):
        i = np.arange(r0, r1, dtype=np.uint64)[:, None]
        j = np.arange(c0, c1, dtype=np.uint64)[None, :]
        counter = i * np.uint64(cols) + j
        bits = splitmix64(counter ^ _key(seed, stream))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
