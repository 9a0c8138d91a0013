"""Single-worker multiplicative-update NMF.

This is the reference path: the distributed and out-of-core engines are
tested against it, so the operation order here (W update, then H update,
with ``W @ (H H^T)`` and ``(W^T W) @ H`` groupings) is deliberate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg, rng
from .counters import PhaseCounters, PhaseTimer


class DivergenceError(FloatingPointError):
    """Factors contain NaN or Inf."""


@dataclass
class NmfConfig:
    k: int
    eta: float = 1e-4
    max_iters: int = 1000
    error_check_interval: int = 10
    epsilon: float = linalg.DEFAULT_EPS
    seed: int = 0
    init: str = "uniform01"
    init_w: object = None
    init_h: object = None
    # row-block height for the streamed residual; None = linalg default
    residual_block_rows: int | None = None

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if int(self.error_check_interval) < 1:
            raise ValueError("error_check_interval must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.init not in ("uniform01", "from_files"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "from_files" and (self.init_w is None or self.init_h is None):
            raise ValueError("init='from_files' needs init_w and init_h")

    @property
    def block_rows(self):
        return self.residual_block_rows or linalg.DEFAULT_BLOCK_ROWS

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("k", "eta", "max_iters", "error_check_interval",
                                          "epsilon", "seed", "init", "residual_block_rows")}
        for name in ("init_w", "init_h"):
            v = getattr(self, name)
            d[name] = v if isinstance(v, (str, type(None))) else "<array>"
        return d


@dataclass
class NmfResult:
    W: np.ndarray
    H: np.ndarray
    error_trace: list
    iterations_run: int
    converged: bool
    counters: PhaseCounters = field(default_factory=PhaseCounters)
    collective_stats: object = None
    # the relative error is ||A - WH||_F / ||A||_F
    error_normalization: str = "relative_to_norm_A"

    @property
    def final_error(self):
        return self.error_trace[-1][1] if self.error_trace else math.nan

    def report(self):
        """JSON-ready summary (no factor payloads)."""
        out = {
            "shape_W": list(self.W.shape),
            "shape_H": list(self.H.shape),
            "error_trace": [[int(i), float(e)] for i, e in self.error_trace],
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "error_normalization": self.error_normalization,
            "counters": self.counters.to_dict(),
        }
        if self.collective_stats is not None:
            out["collective_stats"] = self.collective_stats.to_dict()
        return out


def init_factors(m, n, k, seed):
    """Uniform(0,1) ``W`` (m x k) and ``H`` (k x n) from the counter-based generator."""
    if min(m, n, k) < 1:
        raise ValueError(f"dimensions must be >= 1, got m={m}, n={n}, k={k}")
    return (rng.uniform_window(seed, rng.STREAM_W, m, k),
            rng.uniform_window(seed, rng.STREAM_H, k, n))


def _load_factor(v, shape, name):
    if isinstance(v, str):
        from .fileio import load_matrix
        v = load_matrix(v)
    v = np.array(v, dtype=np.float64, order="C", copy=True)
    if v.shape != shape:
        raise linalg.ShapeError(f"{name} has shape {v.shape}, expected {shape}")
    linalg.validate_nonnegative(v)
    return v


def initial_factors(cfg, m, n):
    if cfg.init == "from_files":
        return (_load_factor(cfg.init_w, (m, cfg.k), "init_w"),
                _load_factor(cfg.init_h, (cfg.k, n), "init_h"))
    return init_factors(m, n, cfg.k, cfg.seed)


def check_finite(*arrays):
    for x in arrays:
        if not np.all(np.isfinite(x)):
            raise DivergenceError("NaN/Inf detected in factors")


def w_half_step(a, w, h, eps, counters=None):
    hht = linalg.gram_t(h.T)
    aht = linalg.matmul(a, h.T)
    whht = linalg.matmul(w, hht)
    linalg.hadamard_update(w, aht, whht, eps)
    if counters is not None:
        m, k = w.shape
        counters.add_flops("w_update", 2 * k * k * h.shape[1] + _product_flops(a, k) + 2 * m * k * k)


def h_half_step(a, w, h, eps, counters=None):
    wta = linalg.t_matmul(w, a)
    wtw = linalg.gram_t(w)
    wtwh = linalg.matmul(wtw, h)
    linalg.hadamard_update(h, wta, wtwh, eps)
    if counters is not None:
        k, n = h.shape
        counters.add_flops("h_update", _product_flops(a, k) + 2 * k * k * w.shape[0] + 2 * k * k * n)


def _product_flops(a, k):
    a = linalg.resolve(a)
    if linalg.is_sparse(a):
        return 2 * k * a.nnz
    return 2 * k * a.shape[0] * a.shape[1]


def nmf_serial(a, cfg):
    """Factorise ``a ~ W @ H`` with Frobenius multiplicative updates.

    Each iteration updates W and then H.  The relative error is evaluated
    every ``cfg.error_check_interval`` iterations and on the last one; the
    loop stops at the first check with error <= ``cfg.eta``.

    Raises ``ZeroNormError`` for an all-zero ``a``, ``NegativeEntryError``
    for negative input and ``DivergenceError`` when a factor goes non-finite.
    """
    a = linalg.resolve(a)
    m, n = a.shape
    if m < 1 or n < 1:
        raise ValueError(f"empty matrix {a.shape}")
    linalg.validate_nonnegative(a)
    normsq = linalg.squared_norm(a)
    if normsq == 0.0:
        raise linalg.ZeroNormError("relative error undefined: ||A||_F == 0")
    norm = math.sqrt(normsq)

    w, h = initial_factors(cfg, m, n)
    counters = PhaseCounters()
    timer = PhaseTimer(counters)
    trace = []
    converged = False
    it = 0
    with timer.run():
        while it < cfg.max_iters:
            it += 1
            with timer.phase("w_update"):
                w_half_step(a, w, h, cfg.epsilon, counters)
            with timer.phase("h_update"):
                h_half_step(a, w, h, cfg.epsilon, counters)
            if it % cfg.error_check_interval == 0 or it == cfg.max_iters:
                with timer.phase("error_check"):
                    check_finite(w, h)
                    err = math.sqrt(linalg.squared_residual(a, w, h, cfg.block_rows)) / norm
                    counters.add_flops("error_check", 2 * m * n * cfg.k + 3 * m * n)
                trace.append((it, err))
                if err <= cfg.eta:
                    converged = True
                    break
    return NmfResult(w, h, trace, it, converged, counters)
