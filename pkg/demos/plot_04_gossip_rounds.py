"""
Watching gossip rounds
======================

Build a four-node simulator by hand and step through rounds. Each round every
node trains on a minibatch, folds in last round's sign votes and sends its own.
"""

from gossip_dfl import data as D
from gossip_dfl import gossip as G
from gossip_dfl import model as M
from gossip_dfl.numerics import SeededRng

rng = SeededRng(1)
split = D.split_prepared(D.synthesize(2000, 20, 0.2, rng.child(1)), 0.8, rng.child(2))
parts = D.partition_noniid(split.train, 4, 0.5, rng.child(3), split.test)
cfg = M.ModelConfig(input_dim=20)

sim = G.Simulator(parts, G.Topology.ring(4), G.RandomWalk(fanout=1), G.NetworkModel(),
                  cfg, G.TrainingSettings(), rng.child(4))
print("round 0 objective %.5f" % sim.objective())
for _ in range(3):
    res = sim.run_round()
    routes = ", ".join("%d->%d" % (m.sender, m.receiver) for m in res.messages)
    print("round %d: %s  took %.1f ms  objective %.5f" % (res.round + 1, routes, res.duration_ms, sim.objective()))

# a marker spreads along epidemic peer sets
ring = G.Topology.ring(12)
for r in (1, 2, 3):
    print("ring of 12, radius %d: everyone reached after %d rounds" % (r, G.dissemination_rounds(ring, r, 0)))
