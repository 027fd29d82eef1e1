"""
How many categories?
====================

Pick the number of clusters by mean silhouette over a grid of k-means
partitions, then score the chosen partition with Hungarian matching.
"""

import numpy as np

from opengcd import evalkit
from opengcd.core_math import RngState

rng = RngState(0)
centres = np.array([[0, 0], [6, 0], [0, 6], [6, 6], [3, 10.0]])
X = np.concatenate([c + 0.7 * rng.normal((40, 2)) for c in centres])
truth = np.repeat(np.arange(len(centres)), 40)

k = evalkit.estimate_k(X, 2, 10, rng)
print("estimated K:", k)

report = evalkit.cluster_and_score(X, truth, old_set=[0, 1, 2], rng=rng, K=k)
print(f"acc all {report.acc_all:.3f}  old {report.acc_old:.3f}  new {report.acc_new:.3f}")
print("cluster -> class:", report.matching)

# AUROC of a score that separates the last two classes from the rest
novel = truth >= 3
score = X[:, 1] + 0.5 * rng.normal(len(X))
print(f"AUROC of the y coordinate as a novelty score: {evalkit.auroc(score, novel):.3f}")
