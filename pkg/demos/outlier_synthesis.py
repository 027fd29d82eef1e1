"""
Synthetic outliers from class statistics
========================================

Track class Gaussians with moving averages, draw tail, mixture and sphere
outliers from them, and see how the energy and entropy losses score those
outliers under a cosine classifier.
"""

import numpy as np

from opengcd import ufa
from opengcd.core_math import RngState

rng = RngState(0)
d, n_classes = 8, 4

# unit-norm embeddings clustered around one direction per class
centres = rng.normal((n_classes, d))
centres /= np.linalg.norm(centres, axis=1, keepdims=True)
labels = np.repeat(np.arange(n_classes), 50)
z = centres[labels] + 0.15 * rng.normal((len(labels), d))
z /= np.linalg.norm(z, axis=1, keepdims=True)

stats = ufa.ClassStats(tuple(range(n_classes)), d)
for batch in np.array_split(rng.permutation(len(z)), 5):
    ufa.ema_update(stats, z[batch], labels[batch])
print("initialised classes:", stats.initialized_classes)

ood = ufa.propose_ood(stats, rng, n_total=64, beta=2.0, k=2, sigma=0.1)
print("outliers per sampler:", dict(zip(ufa.TAGS, ood.counts())))

# a classifier whose weights point at the class centres
clf = ufa.CosineClassifier(centres.copy(), np.log(10.0), tau_temp=1.0, margin=5.0)
print(f"mean energy, real embeddings: {ufa.energy(clf, z).mean():.2f}")
for i, tag in enumerate(ufa.TAGS):
    E = ufa.energy(clf, ood.z[ood.tags == i])
    print(f"mean energy, {tag:>6} outliers: {E.mean():.2f}")

l_oe, l_ent = ufa.loss_oe(clf, ood), ufa.loss_ent(clf, ood)
print(f"L_OE {l_oe:.3f}  L_ENT {l_ent:.3f}  combined {ufa.loss_ufa(l_oe, l_ent):.3f}")

# entropy as a novelty score: real samples are confident, sphere outliers are not
h_real = ufa.entropy_scores(clf, z)
h_sphere = ufa.entropy_scores(clf, ood.z[ood.tags == 2])
print(f"entropy real {h_real.mean():.3f} vs sphere {h_sphere.mean():.3f} (max {np.log(n_classes):.3f})")
