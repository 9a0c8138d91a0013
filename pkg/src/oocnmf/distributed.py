"""Batched distributed multiplicative updates over a communicator and a chunk store.

CNMF (column partition, W replicated):

* H update is local: ``WTA = sum_p W_p^T A_p``, ``WTW = sum_p W_p^T W_p``,
  then ``H <- H * WTA / (WTW @ H + eps)``.
* W update: ``HHT = allreduce(H H^T)``, then per batch
  ``AHT_p = allreduce(A_p H^T)`` and ``W_p <- W_p * AHT_p / (W_p @ HHT + eps)``.
  That is ``n_B + 1`` all-reduces per iteration.

RNMF (row partition, H replicated) is the same pair with the roles of W
and H exchanged; its W update is local and its H update all-reduces
``W^T W`` once and ``W^T A_p`` per batch.

Operation order and groupings match :func:`oocnmf.serial.nmf_serial`, so a
single worker with a single batch reproduces the serial result bit for bit.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import linalg, rng
from .comm import spawn_group
from .counters import PhaseCounters, PhaseTimer
from .partition import CNMF, make_plan, plan_for_budget
from .serial import NmfResult, _load_factor, check_finite
from .store import StoreConfig, open_store

log = logging.getLogger(__name__)


class ReplicaMismatch(RuntimeError):
    """Replicated factor copies diverged across ranks."""


def source_info(source):
    """``(shape, nnz or None)`` of an array, CSR matrix or PDN1 path."""
    if isinstance(source, (str, os.PathLike)):
        from .fileio import read_header
        hdr = read_header(source)
        return hdr.shape, hdr.nnz
    if linalg.is_sparse(source):
        return source.shape, source.nnz
    return np.shape(source), None


def auto_config(shape, k, n_workers, budget, strategy="auto", nnz=None, n_cb=2,
                block_rows=linalg.DEFAULT_BLOCK_ROWS, prefetch=False):
    """Pick the smallest batch count that fits ``budget`` per worker.

    Returns ``(plan, store_cfg, report)``; the store gets what is left of
    the budget after factors, intermediates and the residual block.
    """
    m, n = shape
    density = 1.0 if nnz is None else max(nnz / (m * n), 1e-12)
    plan, report = plan_for_budget(m, n, k, n_workers, budget, strategy, density, n_cb, block_rows)
    store_cfg = StoreConfig(budget_bytes=budget - report.fixed, n_cb=n_cb, prefetch=prefetch)
    return plan, store_cfg, report


@dataclass
class WorkerState:
    rank: int
    plan: object
    cfg: object
    handle: object
    store: object
    w: np.ndarray
    h: np.ndarray
    counters: PhaseCounters = field(default_factory=PhaseCounters)
    timer: PhaseTimer = None
    debug: bool = False

    def __post_init__(self):
        if self.timer is None:
            self.timer = PhaseTimer(self.counters)

    @property
    def k(self):
        return self.plan.k

    @property
    def eps(self):
        return self.cfg.epsilon

    def batches(self):
        """Yield ``(window, A_p)`` for this rank's batches in ascending order."""
        wins = self.plan.batch_windows(self.rank)
        for p, win in enumerate(wins):
            with self.timer.phase("io"):
                b = self.store.load_batch(win)
                if p + 1 < len(wins):
                    self.store.prefetch(wins[p + 1])
            try:
                yield win, b.ref
            finally:
                self.store.release_batch(b)

    def allreduce(self, buf, phase):
        with self.timer.phase("allreduce"):
            return self.handle.all_reduce_sum(buf, phase)


def _flops(a_ref, k):
    a = a_ref.view()
    if linalg.is_sparse(a):
        return 2 * k * a.nnz
    return 2 * k * a.shape[0] * a.shape[1]


def h_update_cnmf(st):
    """Local H update over all batches of the worker's column slab."""
    k, J = st.h.shape
    wta = np.zeros((k, J))
    wtw = np.zeros((k, k))
    for (r0, r1, _, _), a_p in st.batches():
        with st.timer.phase("h_update"):
            w_p = st.w[r0:r1]
            wta += linalg.t_matmul(w_p, a_p)
            wtw += linalg.gram_t(w_p)
            st.counters.add_flops("h_update", _flops(a_p, k) + 2 * k * k * (r1 - r0))
    with st.timer.phase("h_update"):
        wtwh = linalg.matmul(wtw, st.h)
        linalg.hadamard_update(st.h, wta, wtwh, st.eps)
        st.counters.add_flops("h_update", 2 * k * k * J + 3 * k * J)


def w_update_cnmf(st):
    """W update with one all-reduce of ``H H^T`` and one of ``A_p H^T`` per batch."""
    k, J = st.h.shape
    with st.timer.phase("w_update"):
        hht = linalg.gram_t(st.h.T)
        st.counters.add_flops("w_update", 2 * k * k * J)
    hht = st.allreduce(hht, "w_update")
    for (r0, r1, _, _), a_p in st.batches():
        with st.timer.phase("w_update"):
            w_p = st.w[r0:r1]
            whht = linalg.matmul(w_p, hht)
            aht = linalg.matmul(a_p, st.h.T)
            # W_p H H^T costs I*k^2 and A_p H^T costs I*J*k, not the other way round
            st.counters.add_flops("w_update", 2 * (r1 - r0) * k * k + _flops(a_p, k))
        aht = st.allreduce(aht, "w_update")
        with st.timer.phase("w_update"):
            linalg.hadamard_update(w_p, aht, whht, st.eps)
            st.counters.add_flops("w_update", 3 * (r1 - r0) * k)


def w_update_rnmf(st):
    """Local W update over all batches of the worker's row slab."""
    J, k = st.w.shape
    aht = np.zeros((J, k))
    hht = np.zeros((k, k))
    for (_, _, c0, c1), a_p in st.batches():
        with st.timer.phase("w_update"):
            h_p = st.h[:, c0:c1]
            aht += linalg.matmul(a_p, h_p.T)
            hht += linalg.gram_t(h_p.T)
            st.counters.add_flops("w_update", _flops(a_p, k) + 2 * k * k * (c1 - c0))
    with st.timer.phase("w_update"):
        whht = linalg.matmul(st.w, hht)
        linalg.hadamard_update(st.w, aht, whht, st.eps)
        st.counters.add_flops("w_update", 2 * J * k * k + 3 * J * k)


def h_update_rnmf(st):
    """H update with one all-reduce of ``W^T W`` and one of ``W^T A_p`` per batch."""
    J, k = st.w.shape
    with st.timer.phase("h_update"):
        wtw = linalg.gram_t(st.w)
        st.counters.add_flops("h_update", 2 * k * k * J)
    wtw = st.allreduce(wtw, "h_update")
    for (_, _, c0, c1), a_p in st.batches():
        with st.timer.phase("h_update"):
            h_p = st.h[:, c0:c1]
            wtwh = linalg.matmul(wtw, h_p)
            wta = linalg.t_matmul(st.w, a_p)
            st.counters.add_flops("h_update", 2 * k * k * (c1 - c0) + _flops(a_p, k))
        wta = st.allreduce(wta, "h_update")
        with st.timer.phase("h_update"):
            linalg.hadamard_update(h_p, wta, wtwh, st.eps)
            st.counters.add_flops("h_update", 3 * k * (c1 - c0))


def local_squared_residual(st):
    total = 0.0
    block_rows = st.cfg.block_rows
    cnmf = st.plan.strategy == CNMF
    for (r0, r1, c0, c1), a_p in st.batches():
        with st.timer.phase("error_check"):
            if cnmf:
                total += linalg.squared_residual(a_p, st.w[r0:r1], st.h, block_rows)
            else:
                total += linalg.squared_residual(a_p, st.w, st.h[:, c0:c1], block_rows)
            rows, cols = a_p.shape
            st.counters.add_flops("error_check", 2 * rows * cols * st.k + 3 * rows * cols)
    return total


def _init_state(handle, source, cfg, plan, store_cfg, debug):
    rank = handle.rank
    slab = plan.worker(rank)
    m, n, k = plan.m, plan.n, plan.k
    if cfg.k != k:
        raise ValueError(f"config k={cfg.k} but plan k={k}")
    (wr0, wr1), (hc0, hc1) = slab.w_rows, slab.h_cols
    if cfg.init == "from_files":
        w = _load_factor(cfg.init_w, (m, k), "init_w")[wr0:wr1].copy()
        h = np.ascontiguousarray(_load_factor(cfg.init_h, (k, n), "init_h")[:, hc0:hc1])
    else:
        w = rng.uniform_window(cfg.seed, rng.STREAM_W, m, k, wr0, wr1, 0, k)
        h = rng.uniform_window(cfg.seed, rng.STREAM_H, k, n, 0, k, hc0, hc1)
    store = open_store(source, store_cfg.budget_bytes, store_cfg.n_cb, prefetch=store_cfg.prefetch)
    if store.shape != (m, n):
        store.close()
        raise linalg.ShapeError(f"source shape {store.shape} does not match plan ({m}, {n})")
    return WorkerState(rank, plan, cfg, handle, store, w, h, debug=debug)


def _check_replicas(st):
    """Compare each rank's replicated factor against rank 0's copy, bitwise."""
    rep = st.w if st.plan.strategy == CNMF else st.h
    mine = rep if st.rank == 0 else np.zeros_like(rep)
    ref = st.handle.all_reduce_sum(mine, "debug")
    if not np.array_equal(ref, rep):
        raise ReplicaMismatch(f"rank {st.rank}: replicated factor differs from rank 0")


def _gather(st):
    """Assemble the distributed factor on every rank (zero-padded all-reduce is exact)."""
    plan, slab = st.plan, st.plan.worker(st.rank)
    if plan.strategy == CNMF:
        full = np.zeros((plan.k, plan.n))
        c0, c1 = slab.h_cols
        full[:, c0:c1] = st.h
        return st.w, st.allreduce(full, "gather")
    full = np.zeros((plan.m, plan.k))
    r0, r1 = slab.w_rows
    full[r0:r1] = st.w
    return st.allreduce(full, "gather"), st.h


def run_worker(handle, source, cfg, plan, store_cfg=None, debug=False):
    """One rank's share of a distributed factorisation; call collectively on every rank.

    Every rank gets the same error trace and, after the final gather, the
    same full ``W`` and ``H``.
    """
    store_cfg = store_cfg or StoreConfig()
    if handle.size != plan.n_workers:
        raise ValueError(f"group has {handle.size} ranks, plan expects {plan.n_workers}")
    st = _init_state(handle, source, cfg, plan, store_cfg, debug)
    cnmf = plan.strategy == CNMF
    trace = []
    converged = False
    it = 0
    try:
        with st.timer.run():
            local = 0.0
            for _, a_p in st.batches():
                linalg.validate_nonnegative(a_p)
                local += linalg.squared_norm(a_p)
            normsq = float(st.allreduce(np.array([[local]]), "setup")[0, 0])
            if normsq == 0.0:
                raise linalg.ZeroNormError("relative error undefined: ||A||_F == 0")
            norm = math.sqrt(normsq)
            while it < cfg.max_iters:
                it += 1
                if cnmf:
                    w_update_cnmf(st)
                    h_update_cnmf(st)
                else:
                    w_update_rnmf(st)
                    h_update_rnmf(st)
                if debug:
                    _check_replicas(st)
                if it % cfg.error_check_interval == 0 or it == cfg.max_iters:
                    with st.timer.phase("error_check"):
                        check_finite(st.w, st.h)
                    res = local_squared_residual(st)
                    total = float(st.allreduce(np.array([[res]]), "error_check")[0, 0])
                    err = math.sqrt(total) / norm
                    trace.append((it, err))
                    log.debug("rank %d iter %d rel_err %.3e", st.rank, it, err)
                    if err <= cfg.eta:
                        converged = True
                        break
            w, h = _gather(st)
    finally:
        st.store.close()
    c = st.counters
    sc = st.store.counters
    c.peak_resident_bytes = sc.peak_resident_bytes
    c.bytes_read = sc.bytes_read
    c.batch_loads = sc.loads
    res = NmfResult(w, h, trace, it, converged, c, collective_stats=handle.stats)
    res.store_counters = sc
    res.rank = handle.rank
    return res


def nmf_distributed(source, cfg, plan=None, group=None, store_cfg=None, backend="threads",
                    n_workers=1, n_batches=1, strategy="auto", endpoints=None, timeout=60.0,
                    debug=False):
    """Run a distributed factorisation and return the per-rank ``NmfResult`` list.

    With ``group=None`` a group of ``plan.n_workers`` ranks is created on
    ``backend`` and closed afterwards.  A ``tcp`` group holding a single
    local handle (one process per rank) returns a one-element list.
    """
    if plan is None:
        (m, n), _ = source_info(source)
        plan = make_plan(m, n, cfg.k, n_workers, n_batches, strategy)
    own = group is None
    if own:
        group = spawn_group(plan.n_workers, backend, endpoints=endpoints, timeout=timeout)
    try:
        return group.run(run_worker, source, cfg, plan, store_cfg, debug)
    finally:
        if own:
            group.close()
