import math
from collections import Counter

import numpy as np
import pytest

from gossip_dfl import data as D
from gossip_dfl import gossip as G
from gossip_dfl import model as M
from gossip_dfl.numerics import ParameterError, SeededRng
from gossip_dfl.quantize import NoiseSpec, dpsign, majority_vote

SMALL = M.ModelConfig(input_dim=10, hidden_dims=(8,), latent_dim=4)


def make_sim(k, protocol, seed=0, *, network=None, training=None, topo=None, n=400, cfg=SMALL,
             identical=False):
    rng = SeededRng(seed)
    ds = D.synthesize(n, cfg.input_dim, 0.2, rng.child(1))
    split = D.split_prepared(ds, 0.8, rng.child(2))
    if identical:
        p = D.NodePartition(0, split.train, split.test, np.arange(len(split.train)))
        parts = [p] * k
    else:
        parts = D.partition_noniid(split.train, k, 0.5, rng.child(3), split.test)
    return G.Simulator(parts, topo or G.Topology.ring(k), protocol, network or G.NetworkModel(),
                       cfg, training or G.TrainingSettings(), rng.child(4))


def bfs_ecc(topo, src):
    """Independent eccentricity oracle via boolean adjacency powers."""
    A = np.zeros((topo.k, topo.k), dtype=bool)
    for u, nb in enumerate(topo.adjacency):
        A[u, list(nb)] = True
    reach = np.zeros(topo.k, dtype=bool)
    reach[src] = True
    d = 0
    while not reach.all():
        reach = reach | A[reach].any(axis=0)
        d += 1
    return d


# ---------------------------------------------------------------- topology


def test_topology_validation():
    with pytest.raises(G.ConfigurationError):
        G.Topology(2, ((0,), ()))  # self-loop
    with pytest.raises(G.ConfigurationError):
        G.Topology(2, ((1,), ()))  # asymmetric
    with pytest.raises(G.ConfigurationError):
        G.Topology.from_edges(4, [(0, 1), (2, 3)])  # disconnected
    assert G.Topology.ring(6).diameter() == 3
    assert G.Topology.complete(5).diameter() == 1


def test_topology_file(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text("# a path\n0 1\n1 2\n\n2 3  # tail\n")
    t = G.Topology.load(p)
    assert t.k == 4 and t.adjacency[1] == (0, 2)
    p.write_text("0 1 2\n")
    with pytest.raises(G.ConfigurationError):
        G.Topology.load(p)


# ---------------------------------------------------------------- peer choice


def test_random_walk_two_nodes_forced():
    t = G.Topology.ring(2)
    assert all(G.choose_peers_random_walk(0, t, 1, SeededRng(s)) == [1] for s in range(50))


def test_random_walk_never_self():
    t = G.Topology.ring(7)
    rng = SeededRng(3)
    for i in range(10_000):
        assert 3 not in G.choose_peers_random_walk(3, t, 2, rng.child(i))


def test_random_walk_uniform_chi_square():
    t = G.Topology.ring(5)  # ignored: random walk is topology-oblivious
    rng = SeededRng(11)
    trials = 100_000
    counts = Counter(G.choose_peers_random_walk(0, t, 1, rng.child(i))[0] for i in range(trials))
    assert set(counts) == {1, 2, 3, 4}
    exp = trials / 4
    chi2 = sum((c - exp) ** 2 / exp for c in counts.values())
    # 3 dof: mean 3, sd sqrt(6); 3 sigma bound
    assert chi2 < 3 + 3 * math.sqrt(6)


def test_random_walk_fanout_too_large():
    with pytest.raises(ParameterError):
        G.choose_peers_random_walk(0, G.Topology.ring(3), 3, SeededRng(0))


def test_epidemic_examples():
    assert G.choose_peers_epidemic(0, G.Topology.ring(6), 1) == [1, 5]
    assert G.choose_peers_epidemic(3, G.Topology.ring(8), 2) == [1, 2, 4, 5]
    t = G.Topology.ring(7)
    assert G.choose_peers_epidemic(2, t, t.diameter()) == [0, 1, 3, 4, 5, 6]
    with pytest.raises(ParameterError):
        G.choose_peers_epidemic(0, t, 0)


@pytest.mark.parametrize("k", [5, 12, 13])
@pytest.mark.parametrize("r", [1, 2, 3])
def test_dissemination_matches_bfs(k, r):
    t = G.Topology.ring(k)
    for src in range(k):
        assert G.dissemination_rounds(t, r, src) == math.ceil(bfs_ecc(t, src) / r)


def test_dissemination_general_graph():
    t = G.Topology.from_edges(7, [(0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (5, 6)])
    for r in (1, 2):
        for src in range(7):
            assert G.dissemination_rounds(t, r, src) == math.ceil(bfs_ecc(t, src) / r)
            assert G.dissemination_rounds(t, r, src) <= math.ceil(t.diameter() / r)


# ---------------------------------------------------------------- rounds


def test_single_node_sends_nothing():
    for proto in (G.RandomWalk(), G.Epidemic(), G.CentralFL()):
        sim = make_sim(1, proto)
        w0 = sim.params[0].flat.copy()
        sim.run_round()
        assert sim.total_messages == 0 and sim.total_bytes == 0
        assert not np.array_equal(sim.params[0].flat, w0)


@pytest.mark.parametrize("k", [2, 4, 8])
def test_message_counts(k):
    for proto, expect in [
        (G.RandomWalk(1), k),
        (G.Epidemic(1), k * min(2, k - 1)),
        (G.Epidemic(2), k * min(4, k - 1)),
        (G.CentralFL(), 2 * k - 2),
        (G.CentralFL(quantized=True), 2 * k - 2),
    ]:
        sim = make_sim(k, proto)
        for _ in range(3):
            assert len(sim.run_round().messages) == expect


def test_random_walk_fanout_count():
    sim = make_sim(6, G.RandomWalk(3))
    assert len(sim.run_round().messages) == 18


def test_message_conservation_and_order():
    sim = make_sim(5, G.Epidemic(2), network=G.NetworkModel(jitter_ms=30.0))
    clocks = [sim.clock_ms]
    for _ in range(5):
        sim.run_round()
        clocks.append(sim.clock_ms)
    assert len(sim.delivery_log) == sim.total_messages
    at = [m.deliver_at for m in sim.delivery_log]
    assert at == sorted(at)
    assert all(m.deliver_at >= m.sent_at for m in sim.delivery_log)
    assert np.all(np.diff(clocks) >= 0)
    assert len({id(m) for m in sim.delivery_log}) == len(sim.delivery_log)


def test_drop_probability():
    sim = make_sim(4, G.RandomWalk(), network=G.NetworkModel(drop_prob=0.5))
    for _ in range(20):
        sim.run_round()
    assert sim.total_messages == 80
    assert 20 < len(sim.delivery_log) < 60


def test_payload_bytes_on_messages():
    sim = make_sim(3, G.RandomWalk())
    msgs = sim.run_round().messages
    assert {m.n_bytes for m in msgs} == {math.ceil(sim.n_params / 8) + 13}
    dense = make_sim(3, G.CentralFL()).run_round().messages
    assert {m.n_bytes for m in dense} == {4 * sim.n_params + 13}


def test_round_time_is_last_delivery():
    net = G.NetworkModel(jitter_ms=0.0, base_latency_ms=7.0, compute_ms_per_batch=3.0,
                         bandwidth_bytes_per_ms=10.0)
    sim = make_sim(4, G.Epidemic(1), network=net)
    res = sim.run_round()
    b = res.messages[0].n_bytes
    assert res.duration_ms == pytest.approx(3.0 + 2 * b / 10.0 + 7.0)


# ---------------------------------------------------------------- central


def oracle_votes(sim):
    """Recompute every node's quantized upload for the coming round."""
    out = []
    for node in range(sim.k):
        g = sim.local_gradient(node)
        out.append(dpsign(sim._prepare_for_sign(g), sim.training.noise,
                          sim._stream(G._NOISE, node)))
    return out


def broadcast_of(res):
    return [m for m in res.messages if m.sender == 0][0].gradient


def test_central_unanimity():
    tr = G.TrainingSettings(noise=NoiseSpec(0.0))
    sim = make_sim(4, G.CentralFL(quantized=True), training=tr, identical=True, n=100)
    votes = oracle_votes(sim)
    assert all(v == votes[0] for v in votes)
    assert broadcast_of(sim.run_round()) == votes[0]


def test_central_majority_k3():
    sim = make_sim(3, G.CentralFL(quantized=True), seed=4)
    votes = oracle_votes(sim)
    s = np.stack([v.signs() for v in votes])
    hand = np.where(s.sum(axis=0) >= 0, 1.0, -1.0)
    b = broadcast_of(sim.run_round())
    np.testing.assert_array_equal(b.signs(), hand)
    assert b == majority_vote(votes)


def test_central_straggler_max_rule():
    net = G.NetworkModel(straggler_nodes=(2,), straggler_factor=10.0)
    sim = make_sim(4, G.CentralFL(), network=net)
    res = sim.run_round()
    assert res.compute_ms[2] == 10 * res.compute_ms[0]
    assert res.duration_ms >= 10 * res.compute_ms[0]


def test_straggler_isolation():
    T, factor, c = 10, 10.0, 10.0
    base, slow = G.NetworkModel(), G.NetworkModel(straggler_nodes=(1,), straggler_factor=factor)

    def durations(proto, net):
        sim = make_sim(4, proto, seed=2, network=net)
        return np.array([sim.run_round().duration_ms for _ in range(T)])

    rw_extra = durations(G.RandomWalk(), slow).sum() - durations(G.RandomWalk(), base).sum()
    assert 0 <= rw_extra <= (factor - 1) * c * T + 1e-9
    fl_base, fl_slow = durations(G.CentralFL(), base), durations(G.CentralFL(), slow)
    assert np.all(fl_slow > fl_base)  # every round waits for the straggler
    assert np.all(fl_slow >= factor * c)


def test_straggler_probability_draws():
    net = G.NetworkModel(straggler_prob=1.0, straggler_factor=3.0)
    res = make_sim(3, G.RandomWalk(), network=net).run_round()
    assert res.compute_ms == [30.0, 30.0, 30.0]


# ---------------------------------------------------------------- simulate


def test_zero_rounds_reports_initial_model():
    sim = make_sim(4, G.RandomWalk())
    rep = G.simulate(sim, 0)
    assert rep.total_bytes == 0 and rep.simulated_ms == 0
    assert len(rep.objective) == 1
    assert rep.confusion.total == sum(len(p.test) for p in sim.partitions)


def test_simulate_is_deterministic():
    a = G.simulate(make_sim(4, G.RandomWalk(), seed=9), 5)
    b = G.simulate(make_sim(4, G.RandomWalk(), seed=9), 5)
    assert a.objective == b.objective
    assert a.bytes_per_round == b.bytes_per_round
    assert a.sim_ms_per_round == b.sim_ms_per_round
    assert np.array_equal(a.confusion.counts, b.confusion.counts)


def test_objective_decreases_on_separable_set():
    rng = SeededRng(21)
    n = 400
    y = (rng.uniform(size=n) < 0.5).astype(int)
    X = np.column_stack([0.2 + 0.6 * y + rng.uniform(-0.1, 0.1, n), rng.uniform(0, 1, n)])
    full = D.LabeledSet(X, y)
    parts = D.partition_noniid(full, 4, 0.5, rng.child(1))
    cfg = M.ModelConfig(input_dim=2, hidden_dims=(4,), latent_dim=1)
    sim = G.Simulator(parts, G.Topology.ring(4), G.RandomWalk(), G.NetworkModel(), cfg,
                      G.TrainingSettings(learning_rate=0.01), rng.child(2))
    rep = G.simulate(sim, 50, test=full)
    assert rep.objective[-1] < rep.objective[0]


def test_simulator_rejects_bad_setups():
    with pytest.raises(G.ConfigurationError):
        make_sim(3, G.RandomWalk(3))
    with pytest.raises(G.ConfigurationError):
        make_sim(3, G.RandomWalk(), network=G.NetworkModel(straggler_nodes=(5,)))
    with pytest.raises(ParameterError):
        G.NetworkModel(straggler_factor=0.5)
