"""Autoencoder anomaly detector with a softmax label head.

Layout of the network (all dense layers use leaky ReLU)::

    v -> [self-attention over feature chunks] -> encoder ... -> latent
      latent -> decoder ... -> reconstruction
      latent -> head -> softmax class probabilities

Parameters live in one flat vector (``ModelParams.flat``) so that gradients
can be quantized and exchanged coordinate-wise. Gradients are computed by
hand-written backpropagation; everything works on row batches internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError, SeededRng, ShapeError, as_vector

__all__ = [
    "LayerShape",
    "ModelConfig",
    "ModelParams",
    "ForwardTrace",
    "AnomalyThreshold",
    "build_layers",
    "init_params",
    "forward",
    "loss",
    "backward",
    "minibatch_gradient",
    "batch_loss",
    "batch_gradient",
    "predict",
    "reconstruction_errors",
    "select_threshold",
    "classify",
    "sgd_train",
]

ATTENTION, ENCODER, DECODER, HEAD = "attention", "encoder", "decoder", "head"


@dataclass(frozen=True)
class LayerShape:
    kind: str
    n_in: int
    n_out: int
    chunk: int = 0  # token width, attention layers only

    @property
    def n_params(self) -> int:
        if self.kind == ATTENTION:
            return 3 * self.chunk * self.chunk
        return self.n_out * self.n_in + self.n_out


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 100
    hidden_dims: tuple[int, ...] = (64, 32)
    latent_dim: int = 16
    attention_enabled: bool = False
    attention_heads: int = 1
    attention_chunk: int = 10
    num_classes: int = 2
    leaky_slope: float = 0.01
    classifier_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ParameterError("hidden_dims must be nonempty")
        if not 0 < self.latent_dim < self.input_dim:
            raise ParameterError(
                f"latent_dim must be in (0, input_dim={self.input_dim}), got {self.latent_dim}"
            )
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.classifier_weight < 0:
            raise ParameterError("classifier_weight must be >= 0")
        if self.attention_enabled:
            if self.attention_heads != 1:
                raise ParameterError("only single-head attention is supported")
            if self.attention_chunk < 1 or self.input_dim % self.attention_chunk:
                raise ParameterError(
                    f"attention_chunk={self.attention_chunk} must divide input_dim={self.input_dim}"
                )


class ModelParams:
    """Flat parameter vector plus the layer layout that gives it meaning."""

    def __init__(self, layer_shapes, flat):
        self.layer_shapes = tuple(layer_shapes)
        flat = np.array(flat, dtype=np.float64)
        expected = sum(s.n_params for s in self.layer_shapes)
        if flat.shape != (expected,):
            raise ShapeError(f"flat vector has shape {flat.shape}, layout needs ({expected},)")
        flat.flags.writeable = False
        self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.shape[0]

    def views(self) -> list[dict[str, np.ndarray]]:
        out, pos = [], 0
        for s in self.layer_shapes:
            if s.kind == ATTENTION:
                c2 = s.chunk * s.chunk
                mats = [self.flat[pos + i * c2: pos + (i + 1) * c2].reshape(s.chunk, s.chunk)
                        for i in range(3)]
                out.append(dict(zip(("Wq", "Wk", "Wv"), mats)))
            else:
                nw = s.n_out * s.n_in
                out.append({
                    "W": self.flat[pos:pos + nw].reshape(s.n_out, s.n_in),
                    "b": self.flat[pos + nw:pos + nw + s.n_out],
                })
            pos += s.n_params
        return out

    @classmethod
    def from_views(cls, layer_shapes, views) -> "ModelParams":
        parts = []
        for s, v in zip(layer_shapes, views):
            keys = ("Wq", "Wk", "Wv") if s.kind == ATTENTION else ("W", "b")
            parts.extend(np.asarray(v[k], dtype=np.float64).ravel() for k in keys)
        return cls(layer_shapes, np.concatenate(parts) if parts else np.zeros(0))

    def with_flat(self, flat) -> "ModelParams":
        return ModelParams(self.layer_shapes, flat)

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.layer_shapes == other.layer_shapes
                and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        kinds = ",".join(f"{s.kind}:{s.n_in}->{s.n_out}" for s in self.layer_shapes)
        return f"ModelParams([{kinds}], size={self.size})"


@dataclass
class ForwardTrace:
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    latent: np.ndarray
    reconstruction: np.ndarray
    class_probs: np.ndarray
    logits: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class AnomalyThreshold:
    tau: float

    def __post_init__(self):
        if not self.tau >= 0:
            raise ParameterError(f"tau must be >= 0, got {self.tau}")


def build_layers(cfg: ModelConfig) -> tuple[LayerShape, ...]:
    layers = []
    if cfg.attention_enabled:
        layers.append(LayerShape(ATTENTION, cfg.input_dim, cfg.input_dim, cfg.attention_chunk))
    widths = [cfg.input_dim, *cfg.hidden_dims, cfg.latent_dim]
    for a, b in zip(widths[:-1], widths[1:]):
        layers.append(LayerShape(ENCODER, a, b))
    back = widths[::-1]
    for a, b in zip(back[:-1], back[1:]):
        layers.append(LayerShape(DECODER, a, b))
    layers.append(LayerShape(HEAD, cfg.latent_dim, cfg.num_classes))
    return tuple(layers)


def init_params(cfg: ModelConfig, rng: SeededRng) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    shapes = build_layers(cfg)
    views = []
    for s in shapes:
        if s.kind == ATTENTION:
            r = math.sqrt(6.0 / (2 * s.chunk))
            views.append({k: rng.uniform(-r, r, (s.chunk, s.chunk)) for k in ("Wq", "Wk", "Wv")})
        else:
            r = math.sqrt(6.0 / (s.n_in + s.n_out))
            views.append({"W": rng.uniform(-r, r, (s.n_out, s.n_in)), "b": np.zeros(s.n_out)})
    return ModelParams.from_views(shapes, views)


# ---------------------------------------------------------------- internals


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z, slope):
    return np.where(z > 0, 1.0, slope)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(params: ModelParams, X: np.ndarray):
    d = params.layer_shapes[0].n_in
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"input width {X.shape[-1]} does not match model input_dim {d}")


def _forward_batch(params: ModelParams, cfg: ModelConfig, X: np.ndarray):
    """Run a (B, d) batch; returns a cache consumed by _backward_batch."""
    _check_input(params, X)
    slope = cfg.leaky_slope
    views = params.views()
    cache = {"X": X, "layers": []}
    a = X
    latent = recon = logits = None
    for s, p in zip(params.layer_shapes, views):
        if s.kind == ATTENTION:
            B, c = a.shape[0], s.chunk
            tok = a.reshape(B, -1, c)
            Q, K, V = tok @ p["Wq"], tok @ p["Wk"], tok @ p["Wv"]
            P = _softmax(Q @ K.transpose(0, 2, 1) / math.sqrt(c))
            out = tok + P @ V
            cache["layers"].append({"tok": tok, "Q": Q, "K": K, "V": V, "P": P})
            a = out.reshape(B, -1)
            cache["layers"][-1].update(z=a, a=a)
        elif s.kind == HEAD:
            logits = latent @ p["W"].T + p["b"]
            cache["layers"].append({"z": logits, "a": _softmax(logits)})
        else:
            src = latent if (s.kind == DECODER and recon is None) else a
            z = src @ p["W"].T + p["b"]
            a = _leaky(z, slope)
            cache["layers"].append({"z": z, "a": a, "src": src})
            if s.kind == ENCODER:
                latent = a
            else:
                recon = a
    if recon is None:  # no decoder: the encoder output doubles as reconstruction
        recon = latent
    cache.update(latent=latent, recon=recon, logits=logits, probs=_softmax(logits))
    return cache


def _check_labels(y, cfg: ModelConfig):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= cfg.num_classes):
        raise ParameterError(f"labels must be in [0, {cfg.num_classes})")
    return y


def _backward_batch(params: ModelParams, cfg: ModelConfig, cache, y, lam: float):
    """Gradient of the batch-mean loss w.r.t. params.flat."""
    slope = cfg.leaky_slope
    X = cache["X"]
    B, d = X.shape
    views = params.views()
    grads = [None] * len(views)
    shapes = params.layer_shapes

    d_recon = 2.0 * (cache["recon"] - X) / (d * B)
    probs = cache["probs"]
    d_logits = probs.copy()
    d_logits[np.arange(B), y] -= 1.0
    d_logits *= lam / B

    # head
    h = next(i for i, s in enumerate(shapes) if s.kind == HEAD)
    grads[h] = {"W": d_logits.T @ cache["latent"], "b": d_logits.sum(0)}
    d_latent = d_logits @ views[h]["W"]

    dec = [i for i, s in enumerate(shapes) if s.kind == DECODER]
    enc = [i for i, s in enumerate(shapes) if s.kind == ENCODER]
    if dec:
        da = d_recon
        for i in reversed(dec):
            L = cache["layers"][i]
            dz = da * _leaky_grad(L["z"], slope)
            grads[i] = {"W": dz.T @ L["src"], "b": dz.sum(0)}
            da = dz @ views[i]["W"]
        d_latent = d_latent + da
    else:
        d_latent = d_latent + d_recon

    da = d_latent
    for i in reversed(enc):
        L = cache["layers"][i]
        dz = da * _leaky_grad(L["z"], slope)
        grads[i] = {"W": dz.T @ L["src"], "b": dz.sum(0)}
        da = dz @ views[i]["W"]

    for i, s in enumerate(shapes):
        if s.kind != ATTENTION:
            continue
        L = cache["layers"][i]
        c = s.chunk
        dO = da.reshape(B, -1, c)  # residual: d(out)/d(P@V) is identity
        P, Q, K, V, tok = L["P"], L["Q"], L["K"], L["V"], L["tok"]
        dP = dO @ V.transpose(0, 2, 1)
        dV = P.transpose(0, 2, 1) @ dO
        dS = P * (dP - (dP * P).sum(-1, keepdims=True))
        dQ = dS @ K / math.sqrt(c)
        dK = dS.transpose(0, 2, 1) @ Q / math.sqrt(c)
        tT = tok.transpose(0, 2, 1)
        grads[i] = {"Wq": (tT @ dQ).sum(0), "Wk": (tT @ dK).sum(0), "Wv": (tT @ dV).sum(0)}
    return ModelParams.from_views(shapes, grads).flat.copy()


def _batch_loss_terms(cache, y):
    X = cache["X"]
    mse = ((cache["recon"] - X) ** 2).mean(axis=1)
    logp = cache["logits"] - cache["logits"].max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(y)), y]
    return mse, ce


# ---------------------------------------------------------------- public API


def forward(params: ModelParams, cfg: ModelConfig, v) -> ForwardTrace:
    v = as_vector(v)
    cache = _forward_batch(params, cfg, v[None, :])
    return ForwardTrace(
        pre_activations=[L["z"][0] for L in cache["layers"]],
        activations=[L["a"][0] for L in cache["layers"]],
        latent=cache["latent"][0],
        reconstruction=cache["recon"][0],
        class_probs=cache["probs"][0],
        logits=cache["logits"][0],
    )


def loss(trace: ForwardTrace, v, label: int, lam: float) -> float:
    v = as_vector(v)
    n_classes = trace.class_probs.shape[0]
    if not 0 <= label < n_classes:
        raise ParameterError(f"label {label} outside [0, {n_classes})")
    mse = float(np.mean((trace.reconstruction - v) ** 2))
    if lam == 0:
        return mse
    if trace.logits is not None:
        z = trace.logits - trace.logits.max()
        ce = float(np.log(np.exp(z).sum()) - z[label])
    else:
        ce = float(-np.log(trace.class_probs[label]))
    return mse + lam * ce


def backward(params: ModelParams, cfg: ModelConfig, v, label: int, lam: float) -> np.ndarray:
    v = as_vector(v)
    y = _check_labels([label], cfg)
    cache = _forward_batch(params, cfg, v[None, :])
    return _backward_batch(params, cfg, cache, y, lam)


def batch_gradient(params: ModelParams, cfg: ModelConfig, X, y, lam: float) -> np.ndarray:
    """Mean gradient over the rows of X (array fast path of minibatch_gradient)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("batch must be a nonempty 2-d array")
    y = _check_labels(y, cfg)
    cache = _forward_batch(params, cfg, X)
    return _backward_batch(params, cfg, cache, y, lam)


def minibatch_gradient(params: ModelParams, cfg: ModelConfig, batch, lam: float) -> np.ndarray:
    if len(batch) == 0:
        raise ParameterError("empty batch")
    X = np.stack([as_vector(v) for v, _ in batch])
    y = [int(lbl) for _, lbl in batch]
    return batch_gradient(params, cfg, X, y, lam)


def batch_loss(params: ModelParams, cfg: ModelConfig, X, y, lam: float) -> float:
    """Mean of the per-example loss over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return 0.0
    y = _check_labels(y, cfg)
    mse, ce = _batch_loss_terms(_forward_batch(params, cfg, X), y)
    return float(np.mean(mse + lam * ce))


def reconstruction_errors(params: ModelParams, cfg: ModelConfig, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    cache = _forward_batch(params, cfg, X)
    return ((cache["recon"] - X) ** 2).mean(axis=1)


def predict(params: ModelParams, cfg: ModelConfig, X, tau: AnomalyThreshold | None = None):
    """Batch version of classify: returns (anomaly_flags, class_indices).

    Flags are all False when no threshold is given.
    """
    X = np.asarray(X, dtype=np.float64)
    cache = _forward_batch(params, cfg, X)
    err = ((cache["recon"] - X) ** 2).mean(axis=1)
    flags = err > tau.tau if tau is not None else np.zeros(len(X), dtype=bool)
    return flags, np.argmax(cache["probs"], axis=1)


def select_threshold(errors) -> AnomalyThreshold:
    """Knee of the sorted error curve (largest discrete second difference).

    A curve with no positive bend (flat or concave) yields the maximum error,
    which flags nothing.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.shape[0] < 3:
        raise ParameterError("need at least 3 error values")
    if e[0] < 0:
        raise ParameterError("errors must be non-negative")
    d2 = e[:-2] - 2.0 * e[1:-1] + e[2:]
    i = int(np.argmax(d2))
    scale = max(float(e[-1]), 1e-300)
    if d2[i] <= 1e-12 * scale:
        return AnomalyThreshold(float(e[-1]))
    return AnomalyThreshold(float(e[i + 1]))


def classify(trace: ForwardTrace, v, tau: AnomalyThreshold) -> tuple[bool, int]:
    v = as_vector(v)
    err = float(np.mean((trace.reconstruction - v) ** 2))
    return err > tau.tau, int(np.argmax(trace.class_probs))


def sgd_train(params: ModelParams, cfg: ModelConfig, X, y, *, lr: float = 1e-3,
              batch_size: int = 100, epochs: int = 1, lam: float | None = None,
              rng: SeededRng) -> tuple[ModelParams, list[float]]:
    """Plain minibatch SGD on one node's data.

    Returns the trained parameters and the full-data loss after each epoch
    (index 0 is the loss before training).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lam = cfg.classifier_weight if lam is None else lam
    losses = [batch_loss(params, cfg, X, y, lam)]
    flat = params.flat.copy()
    for _ in range(epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch_size):
            idx = order[start:start + batch_size]
            flat -= lr * batch_gradient(params.with_flat(flat), cfg, X[idx], y[idx], lam)
        params = params.with_flat(flat)
        losses.append(batch_loss(params, cfg, X, y, lam))
    return params, losses
