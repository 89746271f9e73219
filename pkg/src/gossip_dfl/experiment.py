"""Configured end-to-end runs and their on-disk artifacts.

A run directory holds:

- ``run_log.jsonl``   one JSON object per round: round, objective, bytes, sim_ms
- ``metrics.csv``     metric rows x (scenario, node_0 .. node_{K-1}) columns
- ``confusion.csv``   pooled confusion counts (rows true, columns predicted)
- ``confusion.txt``   the same matrix as an aligned text grid
- ``manifest.json``   resolved config, seed, dataset fingerprint, timings

Everything except the timing fields of the manifest is a pure function of
the config and seed.
"""
from __future__ import annotations

import dataclasses
import json
import platform
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from .config import ExperimentConfig
from .gossip import (
    CentralFL,
    Epidemic,
    NetworkModel,
    RandomWalk,
    Simulator,
    Topology,
    TrainingSettings,
    simulate,
)
from .metrics import RunReport, confusion_csv, confusion_text, metrics_table_csv
from .numerics import SeededRng
from .quantize import NoiseSpec

__all__ = [
    "ExperimentResult",
    "build_dataset",
    "build_topology",
    "build_protocol",
    "build_simulator",
    "run_experiment",
    "write_artifacts",
    "ARTIFACTS",
]

ARTIFACTS = ("run_log.jsonl", "metrics.csv", "confusion.csv", "manifest.json")

# child-stream keys under the experiment seed
_DATA, _SPLIT, _PARTITION, _SIM = 100, 101, 102, 103


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: RunReport
    class_names: list[str]
    fingerprint: str
    n_params: int
    node_sizes: list[int]


def build_dataset(cfg: ExperimentConfig, rng: SeededRng) -> D.PreparedSplit:
    ds, pr = cfg.dataset, cfg.prep
    if ds.source == "synthetic":
        prepared = D.synthesize(ds.n, ds.dim, ds.anomaly_rate, rng.child(_DATA))
        return D.split_prepared(prepared, pr.split_ratio, rng.child(_SPLIT))
    if ds.source == "prepared":
        return D.split_prepared(D.load_prepared(ds.paths[0]), pr.split_ratio, rng.child(_SPLIT))
    raws = [D.load_csv(p, ds.scheme) for p in ds.paths]
    raw = raws[0]
    if len(raws) > 1:
        if any(r.feature_names != raw.feature_names or r.class_names != raw.class_names for r in raws):
            raise D.SchemaError("csv files disagree on columns or label scheme")
        raw = D.RawDataset(raw.feature_names, np.vstack([r.rows for r in raws]),
                           np.concatenate([r.labels for r in raws]), raw.class_names)
    if raw.rows.shape[0] == 0:
        raise D.DataError("dataset has no rows")
    return D.prepare(raw, pca_dim=pr.pca_dim, knn_k=pr.knn_k, split_ratio=pr.split_ratio,
                     rng=rng.child(_SPLIT), leakage_free=pr.leakage_free)


def build_topology(cfg: ExperimentConfig) -> Topology:
    p = cfg.protocol
    if p.topology == "ring":
        return Topology.ring(p.nodes)
    if p.topology == "complete":
        return Topology.complete(p.nodes)
    return Topology.load(p.topology, p.nodes)


def build_protocol(cfg: ExperimentConfig):
    p = cfg.protocol
    if p.kind == "random-walk":
        return RandomWalk(p.fanout)
    if p.kind == "epidemic":
        return Epidemic(p.radius)
    return CentralFL(quantized=p.central_quantized)


def build_simulator(cfg: ExperimentConfig, split: D.PreparedSplit, rng: SeededRng) -> Simulator:
    t, n = cfg.training, cfg.network
    parts = D.partition_noniid(split.train, cfg.protocol.nodes, cfg.prep.alpha,
                               rng.child(_PARTITION), split.test)
    model_cfg = M.ModelConfig(
        input_dim=split.train.features.shape[1],
        hidden_dims=cfg.model.hidden_dims,
        latent_dim=cfg.model.latent_dim,
        attention_enabled=cfg.model.attention_enabled,
        attention_chunk=cfg.model.attention_chunk,
        num_classes=len(split.dataset.class_names),
        leaky_slope=cfg.model.leaky_slope,
        classifier_weight=t.classifier_weight,
    )
    training = TrainingSettings(
        learning_rate=t.learning_rate, batch_size=t.batch_size, local_batches=t.local_batches,
        classifier_weight=t.classifier_weight, noise=NoiseSpec(t.noise_sigma),
        vote_scale=t.vote_scale, normalize_before_aggregate=t.normalize_before_aggregate,
        epidemic_aggregation=t.epidemic_aggregation, relative_noise=t.relative_noise,
    )
    network = NetworkModel(**dataclasses.asdict(n))
    return Simulator(parts, build_topology(cfg), build_protocol(cfg), network, model_cfg,
                     training, rng.child(_SIM))


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.validate()
    rng = SeededRng(cfg.seed)
    split = build_dataset(cfg, rng)
    sim = build_simulator(cfg, split, rng)
    rep = simulate(sim, cfg.training.rounds)
    fp = D.fingerprint(np.vstack([split.train.features, split.test.features]),
                       np.concatenate([split.train.labels, split.test.labels]))
    return ExperimentResult(cfg, rep, list(split.dataset.class_names), fp, sim.n_params,
                            [p.n_train for p in sim.partitions])


def _metrics_csv(res: ExperimentResult) -> str:
    rep = res.report
    cols = {rep.protocol: rep.average}
    extra = {rep.protocol: {"total_bytes": rep.total_bytes, "messages": rep.messages,
                            "simulated_ms": rep.simulated_ms, "threshold_tau": rep.threshold,
                            "anomaly_flag_rate": rep.anomaly_flag_rate}}
    for k, r in enumerate(rep.node_reports):
        if r is not None:
            cols[f"node_{k}"] = r
    return metrics_table_csv(cols, extra)


def write_artifacts(res: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = res.report
    with open(out / "run_log.jsonl", "w") as fh:
        for rec in rep.rounds():
            fh.write(json.dumps(rec) + "\n")
    (out / "metrics.csv").write_text(_metrics_csv(res))
    (out / "confusion.csv").write_text(confusion_csv(rep.confusion, res.class_names))
    (out / "confusion.txt").write_text(confusion_text(rep.confusion, res.class_names))
    manifest = {
        "config": res.config.to_dict(),
        "seed": res.config.seed,
        "protocol": rep.protocol,
        "dataset_fingerprint": res.fingerprint,
        "class_names": res.class_names,
        "n_params": res.n_params,
        "node_train_sizes": res.node_sizes,
        "summary": {**rep.average.as_dict(), "total_bytes": rep.total_bytes,
                    "messages": rep.messages, "simulated_ms": rep.simulated_ms},
        # fields below vary between otherwise identical runs
        "wall_seconds": rep.wall_seconds,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": {"gossip_dfl": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out
