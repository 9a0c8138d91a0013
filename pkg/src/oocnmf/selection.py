"""Latent-dimension selection by ensemble stability.

For every candidate ``k`` the matrix is perturbed ``P`` times, each copy is
factorised, and the ``P * k`` columns of W are clustered by one-to-one
matching against the first run.  A ``k`` whose clusters stay tight (high
minimum cosine silhouette) while the reconstruction error stays low is a
plausible latent dimension; the largest such ``k`` is chosen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment

from . import linalg
from .serial import NmfConfig, nmf_serial

log = logging.getLogger(__name__)

EXACT_MATCH_MAX_K = 12


@dataclass
class SelectionConfig:
    k_min: int
    k_max: int
    n_perturbations: int = 16
    delta: float = 0.03
    sil_threshold: float = 0.75
    err_factor: float = 1.5
    # members whose error exceeds prune_factor x the ensemble median are
    # treated as stuck in a poor local minimum and left out; None keeps all
    prune_factor: float | None = 1.5
    nmf: NmfConfig = field(default_factory=lambda: NmfConfig(k=1, eta=0.0, max_iters=1000,
                                                             error_check_interval=100))
    seed: int = 0
    n_jobs: int = 1

    def validate(self, shape):
        lim = min(shape)
        if not (1 <= self.k_min <= self.k_max < lim):
            raise ValueError(f"k range [{self.k_min}, {self.k_max}] must lie within [1, {lim})")
        if self.n_perturbations < 2:
            raise ValueError("need at least 2 perturbations")
        if not (0 < self.delta < 1):
            raise ValueError("delta must be in (0, 1)")
        if self.prune_factor is not None and self.prune_factor < 1:
            raise ValueError("prune_factor must be >= 1")


@dataclass
class PlanConfig:
    """How each ensemble member is factorised when run distributed."""

    n_workers: int = 1
    n_batches: int = 1
    strategy: str = "auto"
    backend: str = "threads"
    store: object = None


@dataclass
class KRecord:
    k: int
    min_silhouette: float
    mean_silhouette: float
    mean_relative_error: float
    cluster_silhouettes: list
    medians: np.ndarray
    n_runs: int
    valid: bool = True
    note: str = ""
    n_pruned: int = 0

    def to_dict(self, with_medians=False):
        d = {
            "k": self.k,
            "min_silhouette": self.min_silhouette,
            "mean_silhouette": self.mean_silhouette,
            "mean_relative_error": self.mean_relative_error,
            "cluster_silhouettes": list(map(float, self.cluster_silhouettes)),
            "n_runs": self.n_runs,
            "n_pruned": self.n_pruned,
            "valid": self.valid,
            "note": self.note,
        }
        if with_medians:
            d["medians"] = self.medians.tolist() if self.medians is not None else None
        return d


@dataclass
class SelectionReport:
    records: list
    chosen_k: int | None
    selection_rationale: str

    def record(self, k):
        return next(r for r in self.records if r.k == k)

    def to_dict(self, with_medians=False):
        return {
            "chosen_k": self.chosen_k if self.chosen_k is not None else "none",
            "selection_rationale": self.selection_rationale,
            "records": [r.to_dict(with_medians) for r in self.records],
        }

    def write_json(self, path, with_medians=True):
        with open(path, "w") as f:
            json.dump(self.to_dict(with_medians), f, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["k", "min_sil", "mean_sil", "mean_err", "valid"])
            for r in self.records:
                wr.writerow([r.k, repr(r.min_silhouette), repr(r.mean_silhouette),
                             repr(r.mean_relative_error), int(r.valid)])


def perturb(a, delta, seed):
    """Multiply every stored entry by an independent uniform(1 - delta, 1 + delta) draw."""
    if not (0 <= delta < 1):
        raise ValueError("delta must be in [0, 1)")
    rng = np.random.default_rng(seed)
    a = linalg.resolve(a)
    if sp.issparse(a):
        out = a.copy()
        out.data = out.data * rng.uniform(1.0 - delta, 1.0 + delta, size=out.data.shape)
        return out
    return a * rng.uniform(1.0 - delta, 1.0 + delta, size=a.shape)


def _normalize_columns(w):
    w = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(w, axis=0)
    bad = norms == 0
    out = np.zeros_like(w)
    out[:, ~bad] = w[:, ~bad] / norms[~bad]
    return out, bad


def _greedy_match(sim):
    """Repeatedly take the largest remaining similarity; returns col index per row."""
    k = sim.shape[0]
    s = sim.copy()
    assign = np.full(k, -1)
    for _ in range(k):
        i, j = np.unravel_index(np.argmax(s), s.shape)
        if not np.isfinite(s[i, j]):
            break
        assign[i] = j
        s[i, :] = -np.inf
        s[:, j] = -np.inf
    return assign


def match_columns(anchors, cols, exact=True):
    """One-to-one anchor -> column assignment maximising total cosine similarity.

    ``anchors`` and ``cols`` are column-normalised ``m x k``.  Returns an
    array ``assign`` with ``assign[c]`` = column matched to anchor ``c``
    (-1 when the only remaining candidates are degenerate).
    """
    sim = anchors.T @ cols
    zero = np.linalg.norm(cols, axis=0) == 0
    sim[:, zero] = -np.inf
    if exact:
        finite = ~zero
        assign = np.full(anchors.shape[1], -1)
        if finite.any():
            idx = np.flatnonzero(finite)
            rows, cols_ = linear_sum_assignment(sim[:, idx], maximize=True)
            assign[rows] = idx[cols_]
        return assign
    return _greedy_match(sim)


@dataclass
class Clustering:
    clusters: list          # per anchor: (m, members) array of unit columns
    medians: np.ndarray     # (m, k)
    assignments: np.ndarray  # (P, k): column of run p matched to cluster c, -1 if none
    degenerate: list        # (run, column) pairs that were zero


def cluster_columns(runs, k=None):
    """Cluster the columns of ``P`` W matrices into ``k`` groups of matched columns.

    Columns are L2-normalised.  Run 0 (or the first run without zero
    columns) provides the anchors; every run's columns are matched to them
    one-to-one, exactly for ``k <= 12`` and greedily above.  Cluster
    representatives are elementwise medians of the member columns.
    """
    runs = [np.asarray(w, dtype=np.float64) for w in runs]
    if len(runs) < 2:
        raise ValueError("need at least two runs")
    k = runs[0].shape[1] if k is None else k
    if any(w.shape != runs[0].shape or w.shape[1] != k for w in runs):
        raise ValueError("all runs must be m x k")
    normed, degenerate = [], []
    for p, w in enumerate(runs):
        wn, bad = _normalize_columns(w)
        normed.append(wn)
        degenerate.extend((p, int(c)) for c in np.flatnonzero(bad))
    anchor_run = next((p for p, (_, bad) in enumerate(map(_normalize_columns, runs)) if not bad.any()), 0)
    anchors = normed[anchor_run]
    exact = k <= EXACT_MATCH_MAX_K
    assignments = np.full((len(runs), k), -1)
    members = [[] for _ in range(k)]
    for p, wn in enumerate(normed):
        assign = np.arange(k) if p == anchor_run else match_columns(anchors, wn, exact)
        assignments[p] = assign
        for c, j in enumerate(assign):
            if j >= 0 and (p, int(j)) not in degenerate:
                members[c].append(wn[:, j])
    clusters = [np.stack(mem, axis=1) if mem else np.zeros((anchors.shape[0], 0)) for mem in members]
    medians = np.stack([np.median(c, axis=1) if c.shape[1] else np.zeros(anchors.shape[0])
                        for c in clusters], axis=1)
    return Clustering(clusters, medians, assignments, degenerate)


def cosine_distances(x):
    """Pairwise ``1 - cos`` between the columns of ``x`` (zero columns: distance 1)."""
    xn, _ = _normalize_columns(x)
    d = 1.0 - xn.T @ xn
    np.clip(d, 0.0, 2.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def silhouette(clusters):
    """Cosine silhouettes of a clustering given as a list of ``(m, members)`` arrays.

    Returns ``(min_sil, mean_sil, per_cluster_mean, per_sample)``.  Samples
    in singleton clusters score 0; a single cluster scores 1 by convention.
    """
    clusters = [np.asarray(c) for c in clusters]
    if any(c.shape[1] == 0 for c in clusters):
        raise ValueError("empty cluster")
    if len(clusters) == 1:
        n = clusters[0].shape[1]
        return 1.0, 1.0, [1.0], np.ones(n)
    x = np.concatenate(clusters, axis=1)
    labels = np.concatenate([np.full(c.shape[1], i) for i, c in enumerate(clusters)])
    d = cosine_distances(x)
    n = x.shape[1]
    sizes = np.bincount(labels)
    # sums[s, c] = total distance from sample s to members of cluster c
    onehot = np.zeros((n, len(clusters)))
    onehot[np.arange(n), labels] = 1.0
    sums = d @ onehot
    own = labels
    a = sums[np.arange(n), own] / np.maximum(sizes[own] - 1, 1)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    sil = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    sil[sizes[own] == 1] = 0.0
    sil = np.clip(sil, -1.0, 1.0)
    per_cluster = [float(sil[labels == c].mean()) for c in range(len(clusters))]
    return float(sil.min()), float(sil.mean()), per_cluster, sil


def pearson_correlation_matrix(w_true, w_est):
    """``r[i, j]`` = Pearson correlation of ``w_true[:, i]`` with ``w_est[:, j]``."""
    x = np.asarray(w_true, dtype=np.float64)
    y = np.asarray(w_est, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise linalg.ShapeError(f"row counts differ: {x.shape} vs {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.linalg.norm(xc, axis=0)
    sy = np.linalg.norm(yc, axis=0)
    if np.any(sx == 0) or np.any(sy == 0):
        raise ValueError("zero-variance column")
    return np.clip((xc / sx).T @ (yc / sy), -1.0, 1.0)


def best_permutation(corr):
    """Column order of ``corr`` that maximises the diagonal sum; returns (perm, diagonal)."""
    rows, cols = linear_sum_assignment(corr, maximize=True)
    perm = cols[np.argsort(rows)]
    return perm, corr[np.arange(len(perm)), perm]


def _run_nmf(a, cfg, plan_cfg):
    if plan_cfg is None or plan_cfg.n_workers == 1 and plan_cfg.n_batches == 1 and plan_cfg.store is None:
        return nmf_serial(a, cfg)
    from .distributed import nmf_distributed
    return nmf_distributed(a, cfg, n_workers=plan_cfg.n_workers, n_batches=plan_cfg.n_batches,
                           strategy=plan_cfg.strategy, backend=plan_cfg.backend,
                           store_cfg=plan_cfg.store)[0]


def _member(a, k, p, sel, plan_cfg):
    """One ensemble member; retried once with fresh seeds.  Returns (W, rel_err) or None."""
    for attempt in range(2):
        ss = np.random.SeedSequence([sel.seed, k, p, attempt])
        s_pert, s_nmf = (int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(2))
        try:
            ap = perturb(a, sel.delta, s_pert)
            cfg = dataclasses.replace(sel.nmf, k=k, seed=s_nmf)
            res = _run_nmf(ap, cfg, plan_cfg)
            err = linalg.relative_error(a, res.W, res.H)
            if not np.isfinite(err):
                raise FloatingPointError("non-finite error")
            return res.W, err
        except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
            log.warning("k=%d member %d attempt %d failed: %s", k, p, attempt, exc)
    return None


def _member_star(args):
    return _member(*args)


def evaluate_k(a, k, sel, plan_cfg=None, pool=None):
    jobs = [(a, k, p, sel, plan_cfg) for p in range(sel.n_perturbations)]
    outs = list(pool.map(_member_star, jobs)) if pool is not None else [_member_star(j) for j in jobs]
    ok = [o for o in outs if o is not None]
    n_pruned = 0
    if sel.prune_factor is not None and len(ok) > 2:
        limit = sel.prune_factor * float(np.median([e for _, e in ok]))
        kept = [o for o in ok if o[1] <= limit]
        n_pruned = len(ok) - len(kept)
        ok = kept
    if len(ok) < 2:
        return KRecord(k, float("nan"), float("nan"), float("nan"), [], None, len(ok), False,
                       "fewer than 2 successful runs", n_pruned)
    ws = [w for w, _ in ok]
    errs = [e for _, e in ok]
    cl = cluster_columns(ws, k)
    if any(c.shape[1] == 0 for c in cl.clusters):
        return KRecord(k, float("nan"), float("nan"), float(np.mean(errs)), [], cl.medians, len(ok),
                       False, "empty cluster after excluding degenerate columns", n_pruned)
    mn, mean, per, _ = silhouette(cl.clusters)
    note = f"{len(cl.degenerate)} degenerate columns excluded" if cl.degenerate else ""
    return KRecord(k, mn, mean, float(np.mean(errs)), per, cl.medians, len(ok), True, note, n_pruned)


def choose_k(records, sil_threshold=0.75, err_factor=1.5):
    """Largest k whose min silhouette clears the threshold and whose error is within
    ``err_factor`` of the lowest error among silhouette-passing k."""
    passing = [r for r in records if r.valid and r.min_silhouette >= sil_threshold]
    if not passing:
        return None, f"no k has min silhouette >= {sil_threshold}"
    best = min(passing, key=lambda r: r.mean_relative_error)
    limit = err_factor * best.mean_relative_error
    ok = [r for r in passing if r.mean_relative_error <= limit]
    chosen = max(ok, key=lambda r: r.k)
    return chosen.k, (
        f"k={chosen.k}: largest k with min silhouette {chosen.min_silhouette:.3f} >= {sil_threshold} "
        f"and mean relative error {chosen.mean_relative_error:.3e} <= {err_factor} x "
        f"{best.mean_relative_error:.3e} (best, k={best.k})")


def select_k(a, sel, plan_cfg=None):
    """Score every ``k`` in ``[sel.k_min, sel.k_max]`` and pick one.

    Relative errors are measured against the unperturbed ``a``.  Members
    whose error is an outlier (``sel.prune_factor`` x the median) are left
    out of clustering and scoring; the count is kept on each record.
    """
    a = linalg.resolve(a)
    sel.validate(a.shape)
    linalg.validate_nonnegative(a)
    pool = ProcessPoolExecutor(sel.n_jobs) if sel.n_jobs > 1 else None
    try:
        records = []
        for k in range(sel.k_min, sel.k_max + 1):
            rec = evaluate_k(a, k, sel, plan_cfg, pool)
            log.info("k=%d min_sil=%.3f mean_err=%.3e", k, rec.min_silhouette, rec.mean_relative_error)
            records.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    chosen, why = choose_k(records, sel.sil_threshold, sel.err_factor)
    return SelectionReport(records, chosen, why)

