"""Synthetic nonnegative test matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SynthSpec:
    m: int
    n: int
    k_true: int
    feature_kind: str = "gaussian_bumps"
    noise: float | None = None
    density: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.k_true <= min(self.m, self.n)):
            raise ValueError(f"k_true={self.k_true} outside [1, min(m, n)={min(self.m, self.n)}]")
        if self.feature_kind not in ("gaussian_bumps", "uniform"):
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")
        if self.density is not None and not (0 < self.density <= 1):
            raise ValueError("density must be in (0, 1]")
        if self.noise is not None and not (0 <= self.noise < 1):
            raise ValueError("noise must be in [0, 1)")


def gaussian_bumps(m, k, rng, floor=0.01):
    """``m x k`` columns of Gaussian bumps over the row index.

    Means sit at the centres of ``k`` equal cells of ``[0, m)``; the width
    is ``m / (4k)``, so neighbouring bumps are four widths apart.  A
    uniform(0, floor) floor keeps every entry strictly positive.
    """
    rows = np.arange(m, dtype=np.float64)[:, None]
    means = (np.arange(k) + 0.5) * (m / k)
    width = m / (4.0 * k)
    w = np.exp(-0.5 * ((rows - means[None, :]) / width) ** 2)
    return w + rng.uniform(0.0, floor, size=(m, k))


def gen_lowrank(spec):
    """Return ``(A, W0, H0)`` with ``A = W0 @ H0`` (before optional noise / masking)."""
    rng = np.random.default_rng(spec.seed)
    if spec.feature_kind == "gaussian_bumps":
        w0 = gaussian_bumps(spec.m, spec.k_true, rng)
    else:
        w0 = rng.uniform(0.0, 1.0, size=(spec.m, spec.k_true))
    h0 = rng.uniform(0.0, 1.0, size=(spec.k_true, spec.n))
    a = w0 @ h0
    if spec.noise:
        a *= rng.uniform(1.0 - spec.noise, 1.0 + spec.noise, size=a.shape)
    if spec.density is not None and spec.density < 1:
        a = sp.csr_matrix(a * (rng.random(a.shape) < spec.density))
        a.eliminate_zeros()
    return a, w0, h0


def gen_sparse_random(m, n, density, seed=0):
    """Random CSR matrix: each entry present with probability ``density``, values uniform(0,1).

    Rows are generated one at a time (binomial count, then distinct
    columns), so no dense ``m x n`` buffer is ever built.
    """
    if not (0 < density <= 1):
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    counts = rng.binomial(n, density, size=m)
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.empty(indptr[-1], dtype=np.int64)
    for r in range(m):
        cols = rng.choice(n, size=counts[r], replace=False)
        cols.sort()
        indices[indptr[r]:indptr[r + 1]] = cols
    # uniform on (0, 1): exclude exact zeros so stored values stay nonzero
    data = 1.0 - rng.random(indptr[-1])
    return sp.csr_matrix((data, indices, indptr), shape=(m, n))
