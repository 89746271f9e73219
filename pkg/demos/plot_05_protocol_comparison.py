"""
Random Walk vs Epidemic vs centralized FL
=========================================

Same data, same seed, three protocols; one slow node in the second pass (not node 0, which hosts the aggregator).
The centralized round has to wait for the straggler every time.
"""

from gossip_dfl.config import ExperimentConfig
from gossip_dfl.experiment import run_experiment

base = ExperimentConfig(seed=2)

for straggler in (False, True):
    cfg = base
    if straggler:
        cfg = cfg.replace(**{"network.straggler_nodes": [1], "network.straggler_factor": 10.0})
        print("\nwith node 1 ten times slower")
    for proto in ("random-walk", "epidemic", "central"):
        rep = run_experiment(cfg.replace(**{"protocol.kind": proto})).report
        print("%-12s acc %.3f  F %.4f -> %.4f  %8d bytes  %9.0f simulated ms" % (
            proto, rep.average.accuracy, rep.objective[0], rep.objective[-1],
            rep.total_bytes, rep.simulated_ms))
