"""Dataset ingestion and preparation.

Pipeline order is fixed: KNN impute -> PCA -> min-max normalize -> stratified
train/test split -> Dirichlet non-IID partition across nodes. By default the
PCA basis and the min/max statistics are fitted on all rows before the split;
``leakage_free=True`` fits them on the training rows only and reuses them for
the test rows.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ParameterError, SeededRng

__all__ = [
    "DataError",
    "ParseError",
    "SchemaError",
    "ImputationError",
    "StratificationError",
    "RawDataset",
    "LabeledSet",
    "PreparedDataset",
    "NodePartition",
    "PreparedSplit",
    "load_csv",
    "knn_impute",
    "pca_reduce",
    "normalize_minmax",
    "split_train_test",
    "partition_noniid",
    "synthesize",
    "prepare",
    "save_prepared",
    "load_prepared",
    "fingerprint",
]

MISSING_TOKENS = {"", "nan", "inf", "+inf", "-inf", "infinity", "-infinity", "na", "null"}

# label token (normalized) -> canonical class name
_LABEL_ALIASES = {
    "noevents": "NoEvents", "noevent": "NoEvents", "normal": "NoEvents",
    "natural": "Natural",
    "attack": "Attack",
}
BINARY_CLASSES = ("Natural", "Attack")
THREE_CLASSES = ("NoEvents", "Natural", "Attack")


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class SchemaError(DataError):
    pass


class ImputationError(DataError):
    pass


class StratificationError(DataError):
    pass


@dataclass
class RawDataset:
    feature_names: list[str]
    rows: np.ndarray  # (n, d) float64, NaN marks a missing cell
    labels: np.ndarray  # (n,) int64
    class_names: list[str]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, len(self.feature_names))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.shape[0] != self.labels.shape[0]:
            raise SchemaError("row count and label count differ")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise SchemaError("label index exceeds class count")

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.rows).sum())


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class PreparedDataset:
    features: np.ndarray  # (n, reduced_dim), entries in [0, 1]
    labels: np.ndarray
    class_names: list[str]
    pca_basis: np.ndarray  # (original_dim, reduced_dim)
    pca_mean: np.ndarray
    feature_min: np.ndarray
    feature_max: np.ndarray
    explained_variance: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def transform(self, rows) -> np.ndarray:
        """Project and normalize new (already imputed) rows with the stored statistics."""
        z = (np.asarray(rows, dtype=np.float64) - self.pca_mean) @ self.pca_basis
        out, _, _ = normalize_minmax(z, self.feature_min, self.feature_max)
        return out


@dataclass
class NodePartition:
    node: int
    train: LabeledSet
    test: LabeledSet
    train_index: np.ndarray = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return len(self.train)


@dataclass
class PreparedSplit:
    dataset: PreparedDataset
    train: LabeledSet
    test: LabeledSet


# ---------------------------------------------------------------- loading


def _label_index(token: str, class_names, line: int) -> int:
    key = token.strip().lower().replace(" ", "").replace("_", "").replace("-", "")
    name = _LABEL_ALIASES.get(key)
    if name is None or name not in class_names:
        raise SchemaError(f"line {line}: unknown label token {token!r}")
    return class_names.index(name)


def load_csv(path, scheme: str = "auto") -> RawDataset:
    """Read a comma-separated file whose final column is the event label.

    ``scheme`` is "binary" (Natural/Attack), "three-class"
    (NoEvents/Natural/Attack) or "auto" (three-class iff a NoEvents label is
    present).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        records = list(csv.reader(fh))
    if not records:
        raise ParseError("missing header row", line=1)
    header = [h.strip() for h in records[0]]
    if len(header) < 2:
        raise ParseError("need at least one feature column and a label column", line=1)
    names = header[:-1]
    body = [(i + 2, r) for i, r in enumerate(records[1:]) if any(c.strip() for c in r)]

    tokens = [r[-1] for _, r in body if r]
    if scheme == "auto":
        has_none = any(_LABEL_ALIASES.get(t.strip().lower().replace(" ", "").replace("_", "")) == "NoEvents"
                       for t in tokens)
        scheme = "three-class" if has_none else "binary"
    if scheme == "binary":
        class_names = list(BINARY_CLASSES)
    elif scheme == "three-class":
        class_names = list(THREE_CLASSES)
    else:
        raise ParameterError(f"unknown label scheme {scheme!r}")

    rows = np.empty((len(body), len(names)))
    labels = np.empty(len(body), dtype=np.int64)
    for i, (line, rec) in enumerate(body):
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line=line)
        for j, cell in enumerate(rec[:-1]):
            c = cell.strip()
            if c.lower() in MISSING_TOKENS:
                rows[i, j] = np.nan
                continue
            try:
                x = float(c)
            except ValueError:
                raise ParseError(f"column {names[j]!r}: not a number: {cell!r}", line=line) from None
            rows[i, j] = x if math.isfinite(x) else np.nan
        labels[i] = _label_index(rec[-1], class_names, line)
    return RawDataset(names, rows, labels, class_names)


# ---------------------------------------------------------------- preparation


def knn_impute(ds: RawDataset, k: int = 5) -> RawDataset:
    """Fill each missing cell with the mean of that feature over the k nearest rows.

    Distance is Euclidean over the features present in both rows; only rows
    that have the feature present are candidates. Ties go to the lower row
    index.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    X = ds.rows
    miss = np.isnan(X)
    if not miss.any():
        return RawDataset(list(ds.feature_names), X.copy(), ds.labels.copy(), list(ds.class_names))
    n = X.shape[0]
    if (miss.all(axis=1)).any():
        raise ImputationError("a row has no present values")
    dead = miss.all(axis=0)
    if dead.any():
        raise ImputationError(f"feature(s) missing in every row: {[ds.feature_names[j] for j in np.flatnonzero(dead)]}")
    k = min(k, n - 1) if n > 1 else 1
    present = ~miss
    filled = np.where(miss, 0.0, X)
    out = X.copy()
    for i in np.flatnonzero(miss.any(axis=1)):
        mutual = present & present[i]
        diff = np.where(mutual, filled - filled[i], 0.0)
        dist = np.sqrt((diff ** 2).sum(axis=1))
        dist[~mutual.any(axis=1)] = np.inf
        dist[i] = np.inf
        order = np.argsort(dist, kind="stable")
        for j in np.flatnonzero(miss[i]):
            donors = order[present[order, j]][:k]
            out[i, j] = X[donors, j].mean()
    return RawDataset(list(ds.feature_names), out, ds.labels.copy(), list(ds.class_names))


@dataclass
class PcaResult:
    projected: np.ndarray
    basis: np.ndarray  # columns are unit principal directions
    mean: np.ndarray
    eigenvalues: np.ndarray

    @property
    def retained_variance(self) -> float:
        return float(self.eigenvalues.sum())


def _power_basis(C: np.ndarray, k: int, tol: float = 1e-9, max_iter: int = 1000):
    d = C.shape[0]
    A = C.copy()
    basis = np.zeros((d, k))
    vals = np.zeros(k)
    for m in range(k):
        v = np.ones(d) + 0.01 * np.arange(d)  # fixed start keeps the solver deterministic
        prev = basis[:, :m]
        v -= prev @ (prev.T @ v)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = A @ v
            w -= prev @ (prev.T @ w)
            nw = np.linalg.norm(w)
            if nw < 1e-300:
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ C @ v)
        basis[:, m] = v
        vals[m] = lam
        A = A - lam * np.outer(v, v)
    return basis, vals


def pca_reduce(X, target_dim: int) -> PcaResult:
    """Project centered rows onto the leading principal directions.

    Directions come from power iteration with deflation (tolerance 1e-9,
    at most 1000 iterations each) on the sample covariance.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.isnan(X).any():
        raise ParameterError("impute missing values before PCA")
    d = X.shape[1]
    if not 1 <= target_dim <= d:
        raise ParameterError(f"target_dim must be in [1, {d}], got {target_dim}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    basis, vals = _power_basis(C, target_dim)
    return PcaResult(Xc @ basis, basis, mean, vals)


def normalize_minmax(features, lo=None, hi=None):
    """Affine map of each column onto [0, 1].

    With ``lo``/``hi`` given (statistics from training rows) values outside
    the range are clipped. Constant columns map to 0.5.
    """
    F = np.asarray(features, dtype=np.float64)
    if lo is None:
        lo = F.min(axis=0) if F.shape[0] else np.zeros(F.shape[1])
        hi = F.max(axis=0) if F.shape[0] else np.zeros(F.shape[1])
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    span = hi - lo
    flat = span <= 0
    out = (F - lo) / np.where(flat, 1.0, span)
    out = np.clip(out, 0.0, 1.0)
    out[:, flat] = 0.5
    return out, lo, hi


def _largest_remainder(total: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() == 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split_train_test(labels, ratio: float, rng: SeededRng):
    """Stratified seeded split; returns (train_index, test_index), both sorted."""
    if not 0 < ratio < 1:
        raise ParameterError(f"ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    sizes = np.array([(labels == c).sum() for c in classes])
    if (sizes < 2).any():
        bad = classes[sizes < 2].tolist()
        raise StratificationError(f"class(es) {bad} have fewer than 2 rows")
    n_train = _largest_remainder(int(round(ratio * labels.shape[0])), sizes)
    n_train = np.clip(n_train, 1, sizes - 1)
    train, test = [], []
    for c, m in zip(classes, n_train):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        train.append(idx[:m])
        test.append(idx[m:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def partition_noniid(train: LabeledSet, K: int, alpha: float, rng: SeededRng,
                     test: LabeledSet | None = None, max_retries: int = 100) -> list[NodePartition]:
    """Dirichlet label-skew partition of the training rows over K nodes.

    Each class is divided among nodes by proportions drawn from
    Dirichlet(alpha). Proportions are redrawn until every node holds at least
    one row. When ``test`` is given, each node also receives a share of every
    test class proportional to its share of that class in training.
    """
    if K < 1:
        raise ParameterError("K must be >= 1")
    if alpha <= 0:
        raise ParameterError("alpha must be > 0")
    n = len(train)
    if K > n:
        raise ParameterError(f"cannot split {n} rows over {K} nodes")
    y = np.asarray(train.labels)
    classes = np.unique(y)
    by_class = {c: np.flatnonzero(y == c) for c in classes}
    by_class = {c: idx[rng.permutation(idx.shape[0])] for c, idx in by_class.items()}

    for _ in range(max_retries):
        counts = {c: _largest_remainder(idx.shape[0], rng.dirichlet(np.full(K, alpha)))
                  for c, idx in by_class.items()}
        per_node = np.sum(list(counts.values()), axis=0)
        if (per_node > 0).all():
            break
    else:
        # move single rows from the fullest nodes to the empty ones
        for k in np.flatnonzero(per_node == 0):
            donor = int(np.argmax(per_node))
            c = max(counts, key=lambda c: counts[c][donor])
            counts[c][donor] -= 1
            counts[c][k] += 1
            per_node = np.sum(list(counts.values()), axis=0)

    if test is not None:
        ty = np.asarray(test.labels)
        test_idx = {c: np.flatnonzero(ty == c) for c in np.unique(ty)}
    parts = []
    offsets = {c: np.concatenate([[0], np.cumsum(counts[c])]) for c in classes}
    test_offsets = {}
    if test is not None:
        for c, idx in test_idx.items():
            w = counts[c] if c in counts else np.ones(K)
            test_offsets[c] = np.concatenate([[0], np.cumsum(_largest_remainder(idx.shape[0], w))])
    for k in range(K):
        idx = np.sort(np.concatenate([by_class[c][offsets[c][k]:offsets[c][k + 1]] for c in classes]))
        tr = LabeledSet(train.features[idx], y[idx])
        if test is not None:
            tidx = np.sort(np.concatenate(
                [test_idx[c][test_offsets[c][k]:test_offsets[c][k + 1]] for c in test_idx]
            )).astype(np.int64)
            te = LabeledSet(test.features[tidx], ty[tidx])
        else:
            te = LabeledSet(train.features[:0], y[:0])
        parts.append(NodePartition(k, tr, te, idx))
    return parts


def synthesize(n: int, dim: int, anomaly_rate: float, rng: SeededRng, *,
               rank: int = 3, noise: float = 0.05, n_modes: int = 3,
               offset: float = 3.0) -> PreparedDataset:
    """Normal rows near a random rank-``rank`` linear manifold, anomalies pushed off it.

    Each anomaly is a manifold point displaced along one of ``n_modes`` fixed
    directions orthogonal to the manifold (one per synthetic attack type) by
    ``offset`` to ``2 * offset`` latent standard deviations. Exactly
    ``round(anomaly_rate * n)`` rows are anomalous (label 1).
    """
    if not 0 < anomaly_rate < 1:
        raise ParameterError("anomaly_rate must lie in (0, 1)")
    if not 0 < rank < dim:
        raise ParameterError("rank must lie in (0, dim)")
    gen = rng.generator
    A = np.linalg.qr(gen.normal(size=(dim, dim)))[0]
    span, ortho = A[:, :rank], A[:, rank:]
    modes = ortho[:, :min(n_modes, dim - rank)]
    n_anom = int(round(anomaly_rate * n))
    Z = gen.normal(size=(n, rank))
    X = Z @ span.T + noise * gen.normal(size=(n, dim))
    labels = np.zeros(n, dtype=np.int64)
    which = gen.integers(0, modes.shape[1], n_anom)
    mag = gen.uniform(offset, 2 * offset, n_anom)
    X[:n_anom] += (modes[:, which] * mag).T
    labels[:n_anom] = 1
    perm = gen.permutation(n)
    X, labels = X[perm], labels[perm]
    features, lo, hi = normalize_minmax(X)
    return PreparedDataset(
        features=features, labels=labels, class_names=["normal", "anomaly"],
        pca_basis=np.eye(dim), pca_mean=np.zeros(dim), feature_min=lo, feature_max=hi,
    )


def prepare(raw: RawDataset, *, pca_dim: int = 100, knn_k: int = 5, split_ratio: float = 0.8,
            rng: SeededRng, leakage_free: bool = False) -> PreparedSplit:
    """Run impute -> PCA -> normalize -> split on a raw dataset."""
    imputed = knn_impute(raw, knn_k) if raw.n_missing else raw
    X, y = imputed.rows, imputed.labels
    pca_dim = min(pca_dim, X.shape[1])
    if leakage_free:
        tr, te = split_train_test(y, split_ratio, rng)
        pca = pca_reduce(X[tr], pca_dim)
        ftr, lo, hi = normalize_minmax(pca.projected)
        prepared = PreparedDataset(ftr, y[tr], list(raw.class_names), pca.basis, pca.mean, lo, hi,
                                   pca.eigenvalues)
        return PreparedSplit(prepared, LabeledSet(ftr, y[tr]), LabeledSet(prepared.transform(X[te]), y[te]))
    pca = pca_reduce(X, pca_dim)
    feats, lo, hi = normalize_minmax(pca.projected)
    prepared = PreparedDataset(feats, y, list(raw.class_names), pca.basis, pca.mean, lo, hi, pca.eigenvalues)
    tr, te = split_train_test(y, split_ratio, rng)
    return PreparedSplit(prepared, LabeledSet(feats[tr], y[tr]), LabeledSet(feats[te], y[te]))


def split_prepared(ds: PreparedDataset, ratio: float, rng: SeededRng) -> PreparedSplit:
    tr, te = split_train_test(ds.labels, ratio, rng)
    return PreparedSplit(ds, LabeledSet(ds.features[tr], ds.labels[tr]),
                         LabeledSet(ds.features[te], ds.labels[te]))


# ---------------------------------------------------------------- cache file


def save_prepared(ds: PreparedDataset, path) -> None:
    """Write a prepared dataset as an uncompressed ``.npz`` archive.

    Arrays: features, labels, class_names, pca_basis, pca_mean, feature_min,
    feature_max, explained_variance.
    """
    with open(path, "wb") as fh:
        np.savez(fh, features=ds.features, labels=ds.labels,
                 class_names=np.array(ds.class_names, dtype=str),
                 pca_basis=ds.pca_basis, pca_mean=ds.pca_mean,
                 feature_min=ds.feature_min, feature_max=ds.feature_max,
                 explained_variance=ds.explained_variance)


def load_prepared(path) -> PreparedDataset:
    with np.load(path, allow_pickle=False) as z:
        return PreparedDataset(
            features=z["features"], labels=z["labels"].astype(np.int64),
            class_names=[str(c) for c in z["class_names"]],
            pca_basis=z["pca_basis"], pca_mean=z["pca_mean"],
            feature_min=z["feature_min"], feature_max=z["feature_max"],
            explained_variance=z["explained_variance"],
        )


def fingerprint(features, labels) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(features, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]
