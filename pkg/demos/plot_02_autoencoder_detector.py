"""
Reconstruction-error anomaly detection
======================================

Train the autoencoder on normal rows only, then pick the threshold at the
knee of the sorted training errors.
"""

import numpy as np

from gossip_dfl import data as D
from gossip_dfl import model as M
from gossip_dfl.numerics import SeededRng

rng = SeededRng(7)
ds = D.synthesize(1000, 20, 0.2, rng.child(1))
normal = ds.labels == 0

cfg = M.ModelConfig(input_dim=20, classifier_weight=0.0)
params, losses = M.sgd_train(M.init_params(cfg, rng.child(2)), cfg,
                             ds.features[normal], ds.labels[normal],
                             lr=0.2, epochs=10, rng=rng.child(3))
print("loss by epoch:", np.round(losses, 4))

errs = M.reconstruction_errors(params, cfg, ds.features)
tau = M.select_threshold(errs[normal])
print("tau = %.5f" % tau.tau)
print("median error, normal  : %.5f" % np.median(errs[normal]))
print("median error, anomaly : %.5f" % np.median(errs[~normal]))

flags, _ = M.predict(params, cfg, ds.features, tau)
print("flagged: %.1f%% of anomalies, %.1f%% of normals"
      % (100 * flags[~normal].mean(), 100 * flags[normal].mean()))

# the attention variant has the same interface
att = M.ModelConfig(input_dim=20, attention_enabled=True, attention_chunk=5)
print("parameters without / with attention:", M.init_params(cfg, rng).size, M.init_params(att, rng).size)
