"""One-bit sign quantization of gradients and its wire format.

Sign convention everywhere: ``sign(0) = +1``. A packed bit of 1 means +1 and
0 means -1; coordinate ``i`` lives in byte ``i // 8`` at bit ``i % 8`` (LSB
first).

Wire layout of a message (little-endian)::

    magic  u8   0x51
    round  u32
    sender u32
    n      u32
    bits   ceil(n / 8) bytes
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .numerics import ParameterError, SeededRng, ShapeError, as_vector, gaussian_sample

__all__ = [
    "MAGIC",
    "HEADER_BYTES",
    "QuantizedGradient",
    "NoiseSpec",
    "sign_plus",
    "pack_signs",
    "unpack_signs",
    "zero_mean",
    "dpsign",
    "majority_vote",
    "aggregate_with_local",
    "apply_update",
    "payload_bytes",
    "dense_payload_bytes",
    "encode_message",
    "decode_message",
]

MAGIC = 0x51
_HEADER = struct.Struct("<BIII")
HEADER_BYTES = _HEADER.size  # 13


def sign_plus(x) -> np.ndarray:
    """Elementwise sign as float +-1 with zero mapped to +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def pack_signs(signs) -> bytes:
    s = np.asarray(signs)
    return np.packbits(s > 0, bitorder="little").tobytes()


def unpack_signs(bits: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(bits, dtype=np.uint8)
    b = np.unpackbits(raw, count=n, bitorder="little")
    return np.where(b == 1, 1.0, -1.0)


@dataclass(frozen=True)
class QuantizedGradient:
    n: int
    bits: bytes

    def __post_init__(self):
        if len(self.bits) != (self.n + 7) // 8:
            raise ShapeError(f"{len(self.bits)} bytes cannot hold exactly {self.n} coordinates")

    @classmethod
    def from_signs(cls, signs) -> "QuantizedGradient":
        s = np.asarray(signs)
        return cls(int(s.shape[0]), pack_signs(s))

    def signs(self) -> np.ndarray:
        return unpack_signs(self.bits, self.n)

    def __neg__(self) -> "QuantizedGradient":
        return QuantizedGradient.from_signs(-self.signs())


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ParameterError(f"sigma must be finite and >= 0, got {self.sigma}")


def zero_mean(g) -> np.ndarray:
    g = as_vector(g)
    if g.shape[0] == 0:
        raise ParameterError("cannot normalize an empty vector")
    out = g - g.mean()
    # second pass removes the rounding residue of the first
    return out - out.mean()


def dpsign(g, noise: NoiseSpec, rng: SeededRng) -> QuantizedGradient:
    g = as_vector(g)
    if g.shape[0] == 0:
        raise ParameterError("cannot quantize an empty vector")
    if noise.sigma > 0:
        g = g + gaussian_sample(rng, 0.0, noise.sigma, g.shape[0])
    return QuantizedGradient.from_signs(sign_plus(g))


def majority_vote(votes) -> QuantizedGradient:
    votes = list(votes)
    if not votes:
        raise ParameterError("majority_vote needs at least one vote")
    n = votes[0].n
    if any(q.n != n for q in votes):
        raise ShapeError("votes have mixed coordinate counts")
    if len(votes) == 1:
        return votes[0]
    total = np.sum([q.signs() for q in votes], axis=0)
    return QuantizedGradient.from_signs(sign_plus(total))


def aggregate_with_local(local, received, scale: float = 1.0) -> np.ndarray:
    """Add the majority vote of the received signs to the local gradient.

    ``scale`` multiplies the +-1 vote before the sum; 1.0 is the plain sum.
    """
    local = as_vector(local)
    received = list(received)
    if not received:
        return local.copy()
    if any(q.n != local.shape[0] for q in received):
        raise ShapeError("received gradient length differs from local gradient")
    return local + scale * majority_vote(received).signs()


def apply_update(w: ModelParams, q: QuantizedGradient, eta: float) -> ModelParams:
    if not 0 < eta < 1:
        raise ParameterError(f"learning rate must lie in (0, 1), got {eta}")
    if q.n != w.size:
        raise ShapeError(f"update has {q.n} coordinates, model has {w.size}")
    return w.with_flat(w.flat - eta * q.signs())


def payload_bytes(q: QuantizedGradient | int) -> int:
    n = q.n if isinstance(q, QuantizedGradient) else int(q)
    return (n + 7) // 8 + HEADER_BYTES


def dense_payload_bytes(n: int) -> int:
    """Size of an unquantized float32 gradient message with the same header."""
    return 4 * int(n) + HEADER_BYTES


def encode_message(q: QuantizedGradient, round_no: int, sender: int) -> bytes:
    return _HEADER.pack(MAGIC, round_no, sender, q.n) + q.bits


def decode_message(buf: bytes) -> tuple[int, int, QuantizedGradient]:
    """Inverse of encode_message: returns (round, sender, gradient)."""
    if len(buf) < HEADER_BYTES:
        raise ShapeError("buffer shorter than message header")
    magic, round_no, sender, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic byte 0x{magic:02x}")
    body = buf[HEADER_BYTES:]
    if len(body) != (n + 7) // 8:
        raise ShapeError(f"payload is {len(body)} bytes, header promises {(n + 7) // 8}")
    return round_no, sender, QuantizedGradient(n, bytes(body))
