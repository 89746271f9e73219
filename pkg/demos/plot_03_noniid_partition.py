"""
Label skew across nodes
=======================

Dirichlet(alpha) class proportions per node. Small alpha gives nodes that see
mostly one class; large alpha approaches an IID split.
"""

import numpy as np

from gossip_dfl import data as D
from gossip_dfl.numerics import SeededRng

rng = SeededRng(3)
ds = D.synthesize(2000, 20, 0.2, rng.child(1))
split = D.split_prepared(ds, 0.8, rng.child(2))

for alpha in (0.1, 0.5, 100.0):
    parts = D.partition_noniid(split.train, 4, alpha, rng.child(3), split.test)
    shares = ["%4d rows, %3.0f%% anomalous" % (p.n_train, 100 * p.train.labels.mean()) for p in parts]
    print("alpha=%-5g" % alpha, " | ".join(shares))

# every training row lands on exactly one node
idx = np.concatenate([p.train_index for p in parts])
print("disjoint and exhaustive:", np.array_equal(np.sort(idx), np.arange(len(split.train))))
