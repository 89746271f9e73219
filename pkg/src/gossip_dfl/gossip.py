"""Round-synchronous discrete-event simulator for gossip-based DFL.

Every round each node

1. computes a minibatch gradient of its local loss at its current weights,
2. adds the majority vote of the sign vectors delivered to it last round,
3. subtracts the mean of the result,
4. quantizes it with ``dpsign`` and applies ``W <- W - eta * sign``,
5. sends the sign vector to the peers picked by the protocol.

Messages travel through a single time-ordered queue. Rounds are barriers:
everything sent in round t is delivered before round t + 1 starts.

Timing model (simulated milliseconds): a node computes for
``compute_ms_per_batch * local_batches`` (times ``straggler_factor`` when it
straggles), then pushes its messages one after another through its uplink at
``bandwidth_bytes_per_ms``; each message then spends ``base_latency_ms`` plus
uniform ``[0, jitter_ms)`` in flight. A round lasts until its last delivery.
"""
from __future__ import annotations

import heapq
import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .data import LabeledSet, NodePartition
from .metrics import ConfusionMatrix, MetricReport, RunReport, confusion, report
from .numerics import ParameterError, SeededRng
from .quantize import (
    NoiseSpec,
    QuantizedGradient,
    aggregate_with_local,
    dense_payload_bytes,
    dpsign,
    majority_vote,
    payload_bytes,
    zero_mean,
)

__all__ = [
    "ConfigurationError",
    "Topology",
    "NetworkModel",
    "RandomWalk",
    "Epidemic",
    "CentralFL",
    "GossipMessage",
    "TrainingSettings",
    "RoundResult",
    "Simulator",
    "choose_peers_random_walk",
    "choose_peers_epidemic",
    "dissemination_rounds",
    "run_round",
    "run_central_fl",
    "simulate",
    "run_experiment",
]

# independent random streams, keyed (stream, round, node)
_BATCH, _NOISE, _PEERS, _JITTER, _STRAGGLE, _DROP = range(1, 7)


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Topology:
    k: int
    adjacency: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.k < 1 or len(self.adjacency) != self.k:
            raise ConfigurationError("adjacency must list neighbors for every node")
        for u, nbrs in enumerate(self.adjacency):
            for v in nbrs:
                if v == u:
                    raise ConfigurationError(f"self-loop at node {u}")
                if not 0 <= v < self.k:
                    raise ConfigurationError(f"node {u} lists unknown neighbor {v}")
                if u not in self.adjacency[v]:
                    raise ConfigurationError(f"edge {u}-{v} is not symmetric")
        if len(self.distances(0)) != self.k:
            raise ConfigurationError("topology is disconnected")

    @classmethod
    def from_edges(cls, k: int, edges) -> "Topology":
        nbrs = [set() for _ in range(k)]
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise ConfigurationError(f"self-loop at node {u}")
            if not (0 <= u < k and 0 <= v < k):
                raise ConfigurationError(f"edge {u}-{v} outside [0, {k})")
            nbrs[u].add(v)
            nbrs[v].add(u)
        return cls(k, tuple(tuple(sorted(s)) for s in nbrs))

    @classmethod
    def ring(cls, k: int) -> "Topology":
        return cls.from_edges(k, [(i, (i + 1) % k) for i in range(k)] if k > 1 else [])

    @classmethod
    def complete(cls, k: int) -> "Topology":
        return cls.from_edges(k, itertools.combinations(range(k), 2))

    @classmethod
    def load(cls, path, k: int | None = None) -> "Topology":
        """Read a whitespace-separated ``u v`` edge list (0-indexed, '#' comments)."""
        edges = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigurationError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            edges.append((int(parts[0]), int(parts[1])))
        n = k if k is not None else (max(max(e) for e in edges) + 1 if edges else 1)
        return cls.from_edges(n, edges)

    def distances(self, src: int) -> dict[int, int]:
        dist = {src: 0}
        q = deque([src])
        while q:
            u = q.popleft()
            for v in self.adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist

    def diameter(self) -> int:
        return max(max(self.distances(u).values()) for u in range(self.k))


# ---------------------------------------------------------------- network and protocols


@dataclass(frozen=True)
class NetworkModel:
    base_latency_ms: float = 20.0
    jitter_ms: float = 5.0
    straggler_prob: float = 0.0
    straggler_factor: float = 1.0
    straggler_nodes: tuple[int, ...] = ()
    bandwidth_bytes_per_ms: float = 50.0
    compute_ms_per_batch: float = 10.0
    drop_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "straggler_nodes", tuple(int(n) for n in self.straggler_nodes))
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ParameterError("latency and jitter must be >= 0")
        if not 0 <= self.straggler_prob <= 1 or not 0 <= self.drop_prob <= 1:
            raise ParameterError("probabilities must lie in [0, 1]")
        if self.straggler_factor < 1:
            raise ParameterError("straggler_factor must be >= 1")
        if self.bandwidth_bytes_per_ms <= 0 or self.compute_ms_per_batch < 0:
            raise ParameterError("bandwidth must be > 0 and compute time >= 0")

    def transmit_ms(self, n_bytes: int) -> float:
        return n_bytes / self.bandwidth_bytes_per_ms


@dataclass(frozen=True)
class RandomWalk:
    fanout: int = 1
    name = "random-walk"

    def __post_init__(self):
        if self.fanout < 1:
            raise ParameterError("fanout must be >= 1")


@dataclass(frozen=True)
class Epidemic:
    radius: int = 1
    name = "epidemic"

    def __post_init__(self):
        if self.radius < 1:
            raise ParameterError("radius must be >= 1")


@dataclass(frozen=True)
class CentralFL:
    quantized: bool = False
    name = "central"


@dataclass(frozen=True)
class GossipMessage:
    sender: int
    receiver: int
    round: int
    gradient: QuantizedGradient | np.ndarray
    sent_at: float
    deliver_at: float
    n_bytes: int


def choose_peers_random_walk(node: int, topo: Topology, fanout: int, rng: SeededRng) -> list[int]:
    """Uniform sample of ``fanout`` distinct nodes other than ``node``; ignores edges."""
    if fanout > topo.k - 1:
        raise ParameterError(f"fanout {fanout} exceeds the {topo.k - 1} other nodes")
    others = np.array([v for v in range(topo.k) if v != node])
    return sorted(int(v) for v in rng.choice(others, fanout, replace=False))


def choose_peers_epidemic(node: int, topo: Topology, radius: int) -> list[int]:
    if radius < 1:
        raise ParameterError("radius must be >= 1")
    return sorted(v for v, d in topo.distances(node).items() if 0 < d <= radius)


def dissemination_rounds(topo: Topology, radius: int, source: int) -> int:
    """Rounds until a marker pushed along epidemic peer sets reaches every node."""
    informed = {source}
    rounds = 0
    while len(informed) < topo.k:
        new = set(informed)
        for u in informed:
            new.update(choose_peers_epidemic(u, topo, radius))
        if new == informed:
            raise ConfigurationError("marker cannot reach every node")
        informed = new
        rounds += 1
    return rounds


# ---------------------------------------------------------------- simulator


@dataclass(frozen=True)
class TrainingSettings:
    learning_rate: float = 1e-3
    batch_size: int = 100
    local_batches: int = 1
    classifier_weight: float = 1.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    vote_scale: str | float = "mean_abs"
    normalize_before_aggregate: bool = False
    epidemic_aggregation: str = "majority"
    relative_noise: bool = True

    def __post_init__(self):
        if not 0 < self.learning_rate < 1:
            raise ParameterError("learning_rate must lie in (0, 1)")
        if self.batch_size < 1 or self.local_batches < 1:
            raise ParameterError("batch_size and local_batches must be >= 1")
        if self.epidemic_aggregation not in ("majority", "sum"):
            raise ParameterError("epidemic_aggregation must be 'majority' or 'sum'")
        if isinstance(self.vote_scale, str) and self.vote_scale != "mean_abs":
            raise ParameterError("vote_scale must be 'mean_abs' or a number")


@dataclass
class RoundResult:
    round: int
    messages: list[GossipMessage]
    compute_ms: list[float]
    finish_ms: list[float]
    duration_ms: float
    wall_seconds: float


class Simulator:
    """Holds per-node weights, inboxes and the simulated clock."""

    def __init__(self, partitions: list[NodePartition], topology: Topology, protocol,
                 network: NetworkModel, model_cfg: M.ModelConfig, training: TrainingSettings,
                 rng: SeededRng, init: M.ModelParams | None = None):
        if len(partitions) != topology.k:
            raise ConfigurationError(f"{len(partitions)} partitions for {topology.k} nodes")
        if isinstance(protocol, RandomWalk) and topology.k > 1 and protocol.fanout > topology.k - 1:
            raise ConfigurationError(f"fanout {protocol.fanout} exceeds the {topology.k - 1} other nodes")
        for s in network.straggler_nodes:
            if not 0 <= s < topology.k:
                raise ConfigurationError(f"straggler node {s} outside [0, {topology.k})")
        self.partitions = partitions
        self.topology = topology
        self.protocol = protocol
        self.network = network
        self.model_cfg = model_cfg
        self.training = training
        self.rng = rng
        w0 = init if init is not None else M.init_params(model_cfg, rng.child(0))
        self.params = [w0] * topology.k  # every node starts from the same W_0
        self.inbox: list[list[QuantizedGradient]] = [[] for _ in range(topology.k)]
        self.round = 0
        self.clock_ms = 0.0
        self.total_bytes = 0
        self.total_messages = 0
        self.wall_seconds = 0.0
        self.delivery_log: list[GossipMessage] = []
        self._queue: list = []
        self._seq = itertools.count()
        n = np.array([p.n_train for p in partitions], dtype=np.float64)
        self.weights = n / n.sum()

    @property
    def k(self) -> int:
        return self.topology.k

    @property
    def n_params(self) -> int:
        return self.params[0].size

    # -- local work

    def _stream(self, stream: int, node: int) -> SeededRng:
        return self.rng.child(stream, self.round, node)

    def local_gradient(self, node: int) -> np.ndarray:
        part = self.partitions[node].train
        tr = self.training
        rng = self._stream(_BATCH, node)
        grads = []
        for _ in range(tr.local_batches):
            if len(part) <= tr.batch_size:
                idx = np.arange(len(part))
            else:
                idx = np.sort(rng.choice(len(part), tr.batch_size, replace=False))
            grads.append(M.batch_gradient(self.params[node], self.model_cfg, part.features[idx],
                                          part.labels[idx], tr.classifier_weight))
        return np.mean(grads, axis=0)

    def _vote_scale(self, g: np.ndarray) -> float:
        s = self.training.vote_scale
        return float(np.mean(np.abs(g))) if s == "mean_abs" else float(s)

    def aggregate(self, node: int, g: np.ndarray) -> np.ndarray:
        received = self.inbox[node]
        scale = self._vote_scale(g)
        if self.training.normalize_before_aggregate:
            g = zero_mean(g)
        if isinstance(self.protocol, Epidemic) and self.training.epidemic_aggregation == "sum":
            out = g.copy()
            for q in received:
                out += scale * q.signs()
            return out
        return aggregate_with_local(g, received, scale)

    def _prepare_for_sign(self, g: np.ndarray) -> np.ndarray:
        """Zero-mean normalization, optionally rescaled to unit mean |g|.

        The rescale leaves every sign unchanged; it makes the dpsign noise
        scale relative to the gradient's own magnitude.
        """
        g = zero_mean(g)
        if self.training.relative_noise:
            s = float(np.mean(np.abs(g)))
            if s > 0:
                g = g / s
        return g

    def compute_ms(self, node: int) -> float:
        net = self.network
        c = net.compute_ms_per_batch * self.training.local_batches
        straggles = node in net.straggler_nodes
        if not straggles and net.straggler_prob > 0:
            straggles = self._stream(_STRAGGLE, node).random() < net.straggler_prob
        return c * net.straggler_factor if straggles else c

    def peers(self, node: int) -> list[int]:
        p = self.protocol
        if self.k == 1:
            return []
        if isinstance(p, RandomWalk):
            return choose_peers_random_walk(node, self.topology, p.fanout, self._stream(_PEERS, node))
        if isinstance(p, Epidemic):
            return choose_peers_epidemic(node, self.topology, p.radius)
        raise ConfigurationError(f"no peer selection for {p!r}")

    # -- messaging

    def _send(self, sender: int, receivers, payload, n_bytes: int, ready_ms: float) -> float:
        """Queue messages through the sender's uplink; returns the last delivery time."""
        net = self.network
        t = ready_ms
        last = ready_ms
        for r in receivers:
            t += net.transmit_ms(n_bytes)
            jitter = self.rng.child(_JITTER, self.round, sender, r).uniform(0.0, net.jitter_ms) \
                if net.jitter_ms > 0 else 0.0
            deliver = t + net.base_latency_ms + jitter
            msg = GossipMessage(sender, r, self.round, payload, self.clock_ms + t,
                                self.clock_ms + deliver, n_bytes)
            self.total_bytes += n_bytes
            self.total_messages += 1
            dropped = net.drop_prob > 0 and \
                self.rng.child(_DROP, self.round, sender, r).random() < net.drop_prob
            if not dropped:
                heapq.heappush(self._queue, (msg.deliver_at, next(self._seq), msg))
            self._sent.append(msg)
            last = max(last, deliver)
        return last

    def _deliver_all(self) -> None:
        last = self.clock_ms
        while self._queue:
            at, _, msg = heapq.heappop(self._queue)
            assert at >= last  # deliveries leave the queue in time order
            last = at
            self.delivery_log.append(msg)
            self.inbox[msg.receiver].append(msg.gradient)

    # -- rounds

    def run_round(self) -> RoundResult:
        if isinstance(self.protocol, CentralFL):
            return self.run_central_fl()
        tr = self.training
        self._sent: list[GossipMessage] = []
        compute, finish, new_params, outgoing = [], [], [], []
        wall = 0.0
        for node in range(self.k):
            t0 = time.perf_counter()
            g = self.local_gradient(node)
            agg = self.aggregate(node, g)
            q = dpsign(self._prepare_for_sign(agg), tr.noise, self._stream(_NOISE, node))
            new_params.append(self.params[node].with_flat(
                self.params[node].flat - tr.learning_rate * q.signs()))
            wall += time.perf_counter() - t0
            outgoing.append(q)
            compute.append(self.compute_ms(node))
        self.inbox = [[] for _ in range(self.k)]
        for node in range(self.k):
            finish.append(self._send(node, self.peers(node), outgoing[node],
                                     payload_bytes(outgoing[node]), compute[node]))
        return self._close_round(new_params, compute, finish, wall)

    def run_central_fl(self) -> RoundResult:
        """Star round: upload to node 0, aggregate there, broadcast one update."""
        tr = self.training
        quantized = getattr(self.protocol, "quantized", True)
        self._sent = []
        compute, uploads = [], []
        wall = 0.0
        for node in range(self.k):
            t0 = time.perf_counter()
            g = self.local_gradient(node)
            if quantized:
                uploads.append(dpsign(self._prepare_for_sign(g), tr.noise, self._stream(_NOISE, node)))
            else:
                uploads.append(g)
            wall += time.perf_counter() - t0
            compute.append(self.compute_ms(node))
        size = payload_bytes(self.n_params) if quantized else dense_payload_bytes(self.n_params)

        arrive = [compute[0]]
        for node in range(1, self.k):
            arrive.append(self._send(node, [0], uploads[node], size, compute[node]))
        self._deliver_all()
        self.inbox = [[] for _ in range(self.k)]
        t0 = time.perf_counter()
        if quantized:
            step = majority_vote(uploads).signs()
            update = QuantizedGradient.from_signs(step)
        else:
            step = np.average(np.stack(uploads), axis=0, weights=self.weights)
            update = step
        ready = max(arrive)
        finish_0 = self._send(0, range(1, self.k), update, size, ready)
        new_params = [w.with_flat(w.flat - tr.learning_rate * step) for w in self.params]
        wall += time.perf_counter() - t0
        self._deliver_all()
        self.inbox = [[] for _ in range(self.k)]  # broadcasts are applied, not re-aggregated
        finish = [finish_0] * self.k
        return self._close_round(new_params, compute, finish, wall)

    def _close_round(self, new_params, compute, finish, wall) -> RoundResult:
        self.params = new_params
        self._deliver_all()
        duration = max(finish) if finish else 0.0
        res = RoundResult(self.round, self._sent, compute, finish, duration, wall)
        self.clock_ms += duration
        self.wall_seconds += wall
        self.round += 1
        return res

    # -- evaluation

    def objective(self) -> float:
        """F(W) = sum_k (N_k / N) f_k(W_k), each node scored with its own weights."""
        lam = self.training.classifier_weight
        return float(sum(
            w * M.batch_loss(self.params[k], self.model_cfg, p.train.features, p.train.labels, lam)
            for k, (w, p) in enumerate(zip(self.weights, self.partitions))
        ))

    def evaluate(self, test: LabeledSet | None = None):
        """Per-node confusion matrices of the class head.

        Each node is scored on its own test share; with ``test`` given, every
        node is scored on that set instead.
        """
        c = self.model_cfg.num_classes
        cms, taus, flags = [], [], []
        for k, p in enumerate(self.partitions):
            data = test if test is not None else p.test
            errs = M.reconstruction_errors(self.params[k], self.model_cfg, p.train.features)
            tau = M.select_threshold(errs) if errs.shape[0] >= 3 else M.AnomalyThreshold(float(errs.max()))
            f, pred = M.predict(self.params[k], self.model_cfg, data.features, tau)
            cms.append(confusion(data.labels, pred, c))
            taus.append(tau.tau)
            flags.append(float(f.mean()) if f.size else 0.0)
        return cms, taus, flags


def run_round(sim: Simulator) -> RoundResult:
    return sim.run_round()


def run_central_fl(sim: Simulator) -> RoundResult:
    return sim.run_central_fl()


def simulate(sim: Simulator, rounds: int, test: LabeledSet | None = None) -> RunReport:
    """Run ``rounds`` rounds and collect the report.

    Without ``test`` each node is evaluated on its own test share and the
    pooled confusion matrix covers every test row once.
    """
    if rounds < 0:
        raise ParameterError("rounds must be >= 0")
    objective = [sim.objective()]
    cum_bytes, cum_ms = [0], [0.0]
    for _ in range(rounds):
        sim.run_round()
        objective.append(sim.objective())
        cum_bytes.append(sim.total_bytes)
        cum_ms.append(sim.clock_ms)
    cms, taus, flags = sim.evaluate(test)
    pooled = ConfusionMatrix(np.sum([cm.counts for cm in cms], axis=0))
    return RunReport(
        protocol=sim.protocol.name,
        objective=objective,
        bytes_per_round=cum_bytes,
        sim_ms_per_round=cum_ms,
        node_reports=[report(cm) if cm.total else None for cm in cms],
        average=report(pooled),
        confusion=pooled,
        total_bytes=sim.total_bytes,
        messages=sim.total_messages,
        simulated_ms=sim.clock_ms,
        wall_seconds=sim.wall_seconds,
        threshold=float(np.mean(taus)),
        anomaly_flag_rate=float(np.mean(flags)),
    )


def run_experiment(cfg) -> RunReport:
    """Build data, partitions and simulator from an ExperimentConfig and run it."""
    from .experiment import run_experiment as _run

    return _run(cfg).report
