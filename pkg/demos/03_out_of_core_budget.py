"""
Running under a memory budget
=============================

Write the matrix to a PDN1 file, give each worker less memory than the
matrix needs and let the planner choose how many batches to stream.
"""

import os
import tempfile

import numpy as np

from oocnmf import NmfConfig, SynthSpec, auto_config, gen_lowrank, make_plan, memory_estimate, nmf_distributed
from oocnmf.fileio import write_pdn1
from oocnmf.store import StoreConfig

A, _, _ = gen_lowrank(SynthSpec(m=400, n=300, k_true=5, seed=2))
path = os.path.join(tempfile.mkdtemp(), "A.pdn1")
write_pdn1(path, A)
print("matrix bytes:", A.nbytes)

budget = 150_000
plan, store_cfg, report = auto_config(A.shape, k=5, n_workers=2, budget=budget)
print(f"budget {budget} B per worker -> {plan.strategy}, n_B = {plan.n_batches}")
print("modelled peak", report.peak, "of which fixed", report.fixed)

cfg = NmfConfig(k=5, eta=0.0, max_iters=30, error_check_interval=10)
streamed = nmf_distributed(path, cfg, plan, store_cfg=store_cfg)
in_core = nmf_distributed(A, cfg, n_workers=2, store_cfg=StoreConfig())

for r in streamed:
    c = r.store_counters
    print(f"rank {r.rank}: loads {c.loads}, evictions {c.evictions}, bytes read {c.bytes_read}, "
          f"peak resident {c.peak_resident_bytes} <= {store_cfg.budget_bytes}")

a = np.array([e for _, e in streamed[0].error_trace])
b = np.array([e for _, e in in_core[0].error_trace])
print("largest relative trace difference:", np.max(np.abs(a - b) / b))

# more batches, smaller peak
for nb in (1, 2, 4, 8):
    rep, _ = memory_estimate(make_plan(400, 300, 5, 2, nb))
    print(f"n_B={nb}: modelled peak {rep.peak}")
