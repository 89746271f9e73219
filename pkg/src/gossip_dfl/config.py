"""Experiment configuration: a YAML tree mapped onto frozen dataclasses.

Every section and key is optional; omitted values take the defaults below.
See ``configs/smoke.yaml`` for an annotated example.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "PrepConfig",
    "ModelSection",
    "TrainingConfig",
    "ProtocolConfig",
    "NetworkConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
]

PROTOCOLS = ("random-walk", "epidemic", "central")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field_path: str, msg: str):
        super().__init__(f"{field_path}: {msg}")
        self.field = field_path


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" | "csv" | "prepared"
    paths: tuple[str, ...] = ()
    scheme: str = "auto"
    n: int = 2000
    dim: int = 20
    anomaly_rate: float = 0.2


@dataclass(frozen=True)
class PrepConfig:
    pca_dim: int = 100
    knn_k: int = 5
    split_ratio: float = 0.8
    alpha: float = 0.5
    leakage_free: bool = False


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (64, 32)
    latent_dim: int = 16
    attention_enabled: bool = False
    attention_chunk: int = 10
    leaky_slope: float = 0.01


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 100
    local_batches: int = 1
    classifier_weight: float = 1.0
    noise_sigma: float = 0.1
    relative_noise: bool = True
    vote_scale: str | float = "mean_abs"
    normalize_before_aggregate: bool = False
    epidemic_aggregation: str = "majority"


@dataclass(frozen=True)
class ProtocolConfig:
    kind: str = "random-walk"
    nodes: int = 4
    fanout: int = 1
    radius: int = 1
    central_quantized: bool = False
    topology: str = "ring"  # "ring" | "complete" | path to an edge-list file


@dataclass(frozen=True)
class NetworkConfig:
    base_latency_ms: float = 20.0
    jitter_ms: float = 5.0
    straggler_prob: float = 0.0
    straggler_factor: float = 1.0
    straggler_nodes: tuple[int, ...] = ()
    bandwidth_bytes_per_ms: float = 50.0
    compute_ms_per_batch: float = 10.0
    drop_prob: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def replace(self, **changes) -> "ExperimentConfig":
        """Dotted-key replace, e.g. ``cfg.replace(**{"protocol.kind": "epidemic"})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *head, last = key.split(".")
            for h in head:
                node = node[h]
            node[last] = value
        return config_from_dict(d)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def validate(self) -> "ExperimentConfig":
        t, p, ds, pr = self.training, self.protocol, self.dataset, self.prep
        _check(0 < t.learning_rate < 1, "training.learning_rate", "must lie in (0, 1)")
        _check(t.rounds >= 0, "training.rounds", "must be >= 0")
        _check(t.batch_size >= 1, "training.batch_size", "must be >= 1")
        _check(t.local_batches >= 1, "training.local_batches", "must be >= 1")
        _check(t.noise_sigma >= 0, "training.noise_sigma", "must be >= 0")
        _check(t.classifier_weight >= 0, "training.classifier_weight", "must be >= 0")
        _check(t.epidemic_aggregation in ("majority", "sum"), "training.epidemic_aggregation",
               "must be 'majority' or 'sum'")
        _check(t.vote_scale == "mean_abs" or isinstance(t.vote_scale, (int, float)),
               "training.vote_scale", "must be 'mean_abs' or a number")
        _check(p.kind in PROTOCOLS, "protocol.kind", f"must be one of {PROTOCOLS}")
        _check(p.nodes >= 1, "protocol.nodes", "must be >= 1")
        _check(p.fanout >= 1, "protocol.fanout", "must be >= 1")
        _check(p.radius >= 1, "protocol.radius", "must be >= 1")
        _check(ds.source in ("synthetic", "csv", "prepared"), "dataset.source",
               "must be 'synthetic', 'csv' or 'prepared'")
        _check(ds.source == "synthetic" or len(ds.paths) > 0, "dataset.paths",
               "needs at least one file for csv/prepared sources")
        _check(0 < ds.anomaly_rate < 1, "dataset.anomaly_rate", "must lie in (0, 1)")
        _check(ds.scheme in ("auto", "binary", "three-class"), "dataset.scheme",
               "must be 'auto', 'binary' or 'three-class'")
        _check(0 < pr.split_ratio < 1, "prep.split_ratio", "must lie in (0, 1)")
        _check(pr.alpha > 0, "prep.alpha", "must be > 0")
        _check(pr.pca_dim >= 1, "prep.pca_dim", "must be >= 1")
        _check(pr.knn_k >= 1, "prep.knn_k", "must be >= 1")
        _check(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        return self


def _check(ok: bool, path: str, msg: str):
    if not ok:
        raise ConfigError(path, msg)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_SECTIONS = {
    "dataset": DatasetConfig,
    "prep": PrepConfig,
    "model": ModelSection,
    "training": TrainingConfig,
    "protocol": ProtocolConfig,
    "network": NetworkConfig,
}


def _build(cls, values, path):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(path, "must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown key")
        default = known[key].default
        if isinstance(default, tuple):
            if isinstance(value, (str, int, float)):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{key}", "must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{key}", "must be true or false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}.{key}", "must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key}", "must be a number")
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(d) - set(_SECTIONS) - {"seed", "output_dir"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    sections = {name: _build(cls, d.get(name), name) for name, cls in _SECTIONS.items()}
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    out = d.get("output_dir", ExperimentConfig.output_dir)
    return ExperimentConfig(**sections, seed=seed, output_dir=str(out)).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"not valid YAML: {e}") from None
    cfg = config_from_dict(raw)
    # relative dataset / topology paths resolve against the config's directory
    base = path.parent
    ds = cfg.dataset
    if ds.paths:
        paths = tuple(str(p if Path(p).is_absolute() else base / p) for p in ds.paths)
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(ds, paths=paths))
    topo = cfg.protocol.topology
    if topo not in ("ring", "complete") and not Path(topo).is_absolute():
        cfg = dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, topology=str(base / topo)))
    return cfg
