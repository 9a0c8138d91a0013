"""
Estimating the number of features
=================================

Factorise many slightly perturbed copies of the data for each candidate k,
cluster the resulting feature columns and look at how stable they are.
The stable k with a low error is the estimate.
"""

import numpy as np

from oocnmf import NmfConfig, SelectionConfig, SynthSpec, gen_lowrank, select_k
from oocnmf.selection import best_permutation, pearson_correlation_matrix

A, W0, _ = gen_lowrank(SynthSpec(m=500, n=100, k_true=4, seed=3))

sel = SelectionConfig(k_min=2, k_max=7, n_perturbations=8, delta=0.03,
                      nmf=NmfConfig(k=1, eta=0.0, max_iters=400, error_check_interval=400), seed=3)
rep = select_k(A, sel)

print(" k  min silhouette  mean error  pruned")
for r in rep.records:
    print(f"{r.k:2d}  {r.min_silhouette:14.3f}  {r.mean_relative_error:10.4f}  {r.n_pruned:6d}")
print("\nchosen:", rep.chosen_k)
print(rep.selection_rationale)

# compare the cluster medians with the features that generated the data
if rep.chosen_k == 4:
    corr = pearson_correlation_matrix(W0, rep.record(4).medians)
    _, diag = best_permutation(corr)
    print("matched correlations:", np.round(diag, 4))
